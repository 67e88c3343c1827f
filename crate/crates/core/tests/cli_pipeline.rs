use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data.pretrain]
name = "pretrain"
mix = { ab = 1.0, a = 0.0, b = 0.0 }
n_utts = 10
min_frames = 12
max_frames = 20

[data.labeled]
name = "labeled"
mix = { ab = 1.0, a = 0.0, b = 0.0 }
n_utts = 8
min_frames = 12
max_frames = 20

[data.test]
name = "test"
mix = { ab = 1.0, a = 0.0, b = 0.0 }
n_utts = 5
min_frames = 12
max_frames = 20

[data.ood]
name = "ood"
n_utts = 6
min_frames = 12
max_frames = 20
mix = { ab = 0.0, a = 1.0, b = 0.0 }

[model]
frontend_dim = 8
embed_dim = 8
heads = 2
ffn_dim = 16
layers = 2
n_clusters = 6

[targets.kmeans]
k = 6
max_iters = 10
restarts = 1

[analysis]
projection_frames = 40

[analysis.kmeans]
k = 6
max_iters = 10
restarts = 1

[pretrain]
updates = 6
frame_budget = 60
log_interval = 2

[finetune]
updates = 6
n_frz = 3
frame_budget = 60
log_interval = 2

[gradcheck]
frames = 6
coords = 20
"#;

struct Cli {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Cli {
    fn new(config: &str) -> Cli {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experiment.toml");
        std::fs::write(&path, config).unwrap();
        Cli { dir, config: path }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_uhubert"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out-dir")
            .arg(self.dir.path().join("run"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join("run").join(rel).to_string_lossy().into_owned()
    }
}

fn wers(stdout: &str) -> Vec<String> {
    stdout.lines().filter(|l| l.contains(" wer ")).map(str::to_owned).collect()
}

#[test]
fn full_pipeline_through_the_binary() {
    let cli = Cli::new(TINY);
    cli.ok(&["gen-data"]);
    for c in ["pretrain", "labeled", "test", "ood"] {
        assert!(Path::new(&cli.path(&format!("corpora/{c}"))).is_dir());
    }
    cli.ok(&["cluster"]);
    let targets = cli.path("targets/raw/assignments.jsonl");
    cli.ok(&["pretrain", "--targets", &targets]);
    let pretrained = cli.path("pretrain/model.ckpt");

    cli.ok(&["cluster", "--checkpoint", &pretrained, "--k", "6", "--out", &cli.path("targets/iter2")]);
    cli.ok(&["pnmi", "--checkpoint", &pretrained]);
    let csv = std::fs::read_to_string(cli.path("pnmi/pnmi.csv")).unwrap();
    assert!(csv.starts_with("codebook,y_av,y_a,y_b"), "{csv}");
    assert_eq!(csv.lines().count(), 5);
    cli.ok(&["project", "--checkpoint", &pretrained]);

    cli.ok(&["finetune", "--checkpoint", &pretrained, "--ft-modality", "a", "--out", &cli.path("ft")]);
    let tuned = cli.path("ft/model.ckpt");
    let out = cli.ok(&["evaluate", "--checkpoint", &tuned]);
    let lines = wers(&out);
    assert_eq!(lines.len(), 5, "{out}");
    for cond in ["ab-clean", "ab-noisy", "a-clean", "a-noisy", "b"] {
        assert!(lines.iter().any(|l| l.starts_with(cond)), "{cond} missing in {out}");
    }
    let only_b = cli.ok(&["evaluate", "--checkpoint", &tuned, "--modality", "b"]);
    assert_eq!(wers(&only_b).len(), 1);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cli.path("manifest.json")).unwrap()).unwrap();
    let commands: Vec<&str> = manifest["commands"].as_array().unwrap().iter().map(|c| c["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["gen-data", "cluster", "pretrain", "cluster", "pnmi", "project", "finetune", "evaluate", "evaluate"]);
}

#[test]
fn seq2seq_beam_one_matches_greedy() {
    let cli = Cli::new(&TINY.replace("[finetune]\n", "[finetune]\ntask = \"seq2seq\"\n"));
    cli.ok(&["gen-data"]);
    cli.ok(&["cluster"]);
    cli.ok(&["pretrain", "--targets", &cli.path("targets/raw/assignments.jsonl")]);
    cli.ok(&["finetune", "--checkpoint", &cli.path("pretrain/model.ckpt"), "--out", &cli.path("ft")]);
    let tuned = cli.path("ft/model.ckpt");
    let greedy = cli.ok(&["evaluate", "--checkpoint", &tuned, "--greedy"]);
    let beam1 = cli.ok(&["evaluate", "--checkpoint", &tuned, "--beam", "1"]);
    assert_eq!(wers(&greedy), wers(&beam1));
}

#[test]
fn same_config_reproduces_outputs() {
    let first = Cli::new(TINY);
    let second = Cli::new(TINY);
    for cli in [&first, &second] {
        cli.ok(&["gen-data"]);
        cli.ok(&["cluster"]);
        cli.ok(&["pretrain", "--targets", &cli.path("targets/raw/assignments.jsonl")]);
    }
    for rel in ["targets/raw/assignments.jsonl", "pretrain/model.ckpt", "pretrain/log.jsonl"] {
        assert_eq!(std::fs::read(first.path(rel)).unwrap(), std::fs::read(second.path(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn errors_exit_with_codes() {
    let bad = Cli::new("[model]\nlayerz = 2\n");
    let out = bad.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");

    let cli = Cli::new(TINY);
    let out = cli.run(&["pretrain", "--targets", &cli.path("missing.jsonl")]);
    assert_eq!(out.status.code(), Some(2));

    let out = cli.run(&["finetune", "--checkpoint", "x.ckpt", "--ft-modality", "c"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_command_passes() {
    let cli = Cli::new(TINY);
    let out = cli.ok(&["gradcheck"]);
    assert!(out.contains("(pass)"), "{out}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            uhubert::cli::ExperimentConfig::load(&path).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 2);
    let default = uhubert::cli::ExperimentConfig::load(&dir.join("default.toml")).unwrap();
    assert_eq!(default.hash(), uhubert::cli::ExperimentConfig::default().hash());
}
