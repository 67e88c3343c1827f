use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use uhubert::cli::{exit_code, parse_profile, ExperimentConfig, Run};
use uhubert::datagen::Profile;
use uhubert::finetune::{DecodeConfig, TestCondition};
use uhubert::repro::{self, Scale};
use uhubert::Result;

#[derive(Parser)]
#[command(name = "uhubert", version, about = "Multimodal masked-prediction pre-training on synthetic two-stream data")]
struct Cli {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run directory from the configuration.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestModality {
    Ab,
    A,
    B,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Full,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured corpora.
    GenData,
    /// Fit a codebook on raw anchor features or on a checkpoint's features.
    Cluster {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train on cluster assignments.
    Pretrain {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint on labeled data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_parser = parse_profile)]
        ft_modality: Option<Profile>,
        #[arg(long)]
        lfrz: Option<usize>,
        #[arg(long)]
        nfrz: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        updates: Option<usize>,
        /// Noise augmentation of modality A during fine-tuning.
        #[arg(long, value_enum)]
        noise: Option<Switch>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word error rates of a fine-tuned checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        modality: TestModality,
        /// Add 0 dB noise to modality A; without the flag both clean and noisy conditions run.
        #[arg(long, value_enum)]
        noise: Option<Switch>,
        #[arg(long)]
        beam: Option<usize>,
        /// Decode greedily even if the configuration sets a beam.
        #[arg(long, conflicts_with = "beam")]
        greedy: bool,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-quantization PNMI matrix and per-layer tables.
    Pnmi {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-dimensional projection of the three feature views.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the configured model.
    Gradcheck,
    /// Run an acceptance suite, or all of them with `all`.
    Repro {
        suite: String,
        #[arg(long, value_enum, default_value = "full")]
        scale: ScaleArg,
    },
}

fn conditions(modality: TestModality, noise: Option<Switch>) -> Vec<TestCondition> {
    let profiles = match modality {
        TestModality::Ab => vec![Profile::AB],
        TestModality::A => vec![Profile::A],
        TestModality::B => vec![Profile::B],
        TestModality::All => vec![Profile::AB, Profile::A, Profile::B],
    };
    let mut out = Vec::new();
    for p in profiles {
        let noisy: &[bool] = match (p, noise) {
            (Profile::B, _) => &[false],
            (_, Some(Switch::On)) => &[true],
            (_, Some(Switch::Off)) => &[false],
            (_, None) => &[false, true],
        };
        for &n in noisy {
            out.push(TestCondition::new(p, n));
        }
    }
    out
}

/// Outcome of a command that ran to completion.
enum Done {
    Ok,
    CheckFailed,
}

fn run(cli: Cli) -> Result<Done> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = cli.out_dir {
        config.output_dir = d;
    }
    let run = Run::new(config)?;
    let print = |paths: Vec<PathBuf>| {
        for p in paths {
            println!("{}", p.display());
        }
    };
    match cli.command {
        Command::GenData => print(run.cmd_gen_data()?),
        Command::Cluster { checkpoint, corpus, k, out } => {
            print(run.cmd_cluster(checkpoint.as_deref(), corpus.as_deref(), k, out.as_deref())?)
        }
        Command::Pretrain { targets, corpus, out } => print(run.cmd_pretrain(corpus.as_deref(), &targets, out.as_deref())?),
        Command::Finetune { checkpoint, corpus, ft_modality, lfrz, nfrz, lr, updates, noise, out } => {
            let mut ft = run.config.finetune.clone();
            if let Some(m) = ft_modality {
                ft.modality = m;
            }
            if let Some(u) = updates {
                ft.updates = u;
                ft.n_frz = ft.n_frz.min(u);
            }
            if let Some(n) = nfrz {
                ft.n_frz = n;
            }
            if let Some(l) = lfrz {
                ft.l_frz = l;
            }
            if let Some(lr) = lr {
                ft.lr = lr;
            }
            match noise {
                Some(Switch::Off) => ft.noise.p_apply = 0.0,
                Some(Switch::On) if ft.noise.p_apply == 0.0 => ft.noise.p_apply = 0.25,
                _ => {}
            }
            print(run.cmd_finetune(&checkpoint, corpus.as_deref(), &ft, out.as_deref())?)
        }
        Command::Evaluate { checkpoint, corpus, modality, noise, beam, greedy, alpha, out } => {
            let mut decode: DecodeConfig = run.config.decode.clone();
            if beam.is_some() {
                decode.beam = beam;
            }
            if greedy {
                decode.beam = None;
            }
            if let Some(a) = alpha {
                decode.alpha = a;
            }
            let (report, path) = run.cmd_evaluate(&checkpoint, corpus.as_deref(), &conditions(modality, noise), &decode, out.as_deref())?;
            for e in &report.entries {
                println!("{:<9} wer {:.4}  token accuracy {:.4}", e.condition.as_str(), e.wer, e.token_accuracy);
            }
            println!("{}", path.display());
        }
        Command::Pnmi { checkpoint, corpus, k, out } => print(run.cmd_pnmi(&checkpoint, corpus.as_deref(), k, out.as_deref())?),
        Command::Project { checkpoint, corpus, out } => print(run.cmd_project(&checkpoint, corpus.as_deref(), out.as_deref())?),
        Command::Gradcheck => {
            let (err, pass) = run.cmd_gradcheck()?;
            println!("max relative error {err:.3e} ({})", if pass { "pass" } else { "fail" });
            if !pass {
                return Ok(Done::CheckFailed);
            }
        }
        Command::Repro { suite, scale } => {
            let scale = match scale {
                ScaleArg::Full => Scale::Full,
                ScaleArg::Smoke => Scale::Smoke,
            };
            let suites: Vec<&str> = if suite == "all" { repro::SUITES.to_vec() } else { vec![suite.as_str()] };
            let mut failed = false;
            for s in suites {
                let report = run.cmd_repro(s, scale)?;
                println!("{}", report.line());
                failed |= !report.passed && !report.soft;
            }
            if failed {
                return Ok(Done::CheckFailed);
            }
        }
    }
    Ok(Done::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            let kind = if e.is_validation() { "validation" } else { "runtime" };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

