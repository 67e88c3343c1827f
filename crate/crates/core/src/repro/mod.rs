//! End-to-end acceptance suites. Each suite runs a complete experiment and
//! reports named checks with their measured values and thresholds.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{assign, build_targets, KMeansConfig, TargetConfig};
use crate::datagen::{generate_corpus, CorpusSpec, GeneratorConfig, ProfileMix};
use crate::error::{Error, Result};
use crate::finetune::{DecodeConfig, FinetuneConfig, TestCondition};
use crate::metrics::AnalysisConfig;
use crate::model::{Model, ModelConfig};
use crate::pretrain::{masked_accuracy, pretrain, LrSchedule, MaskConfig, NoiseAugConfig, PretrainConfig};

mod oracles;
pub mod study;

pub use study::{CodebookResult, SeedRun, StudyConfig};

/// Experiment size. `Smoke` exercises every code path in seconds; only
/// `Full` verdicts are meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Full,
    Smoke,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Informational checks do not decide the suite verdict.
    pub gate: bool,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Check {
        Check { name: name.into(), value, threshold, passed: value <= threshold, gate: true, detail: String::new() }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Check {
        Check { name: name.into(), value, threshold, passed: value >= threshold, gate: true, detail: String::new() }
    }

    pub fn flag(name: impl Into<String>, passed: bool) -> Check {
        Check { name: name.into(), value: f64::from(u8::from(passed)), threshold: 1.0, passed, gate: true, detail: String::new() }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Check {
        self.detail = detail.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub criterion: usize,
    pub passed: bool,
    /// Soft suites warn instead of failing.
    pub soft: bool,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    /// One summary line.
    pub fn line(&self) -> String {
        let verdict = match (self.passed, self.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        let failing: Vec<&str> = self.checks.iter().filter(|c| c.gate && !c.passed).map(|c| c.name.as_str()).collect();
        let mut s = format!("{verdict} criterion {} {} ({} checks, {:.1}s)", self.criterion, self.suite, self.checks.len(), self.seconds);
        if !failing.is_empty() {
            s.push_str(&format!(" failing: {}", failing.join(", ")));
        }
        s
    }
}

/// Suite names, in criterion order.
pub const SUITES: [&str; 10] = [
    "gradcheck",
    "learning-signal",
    "codebook-agnostic",
    "zero-shot",
    "ood-transfer",
    "layer-gap",
    "extra-unimodal",
    "oracles",
    "invariants",
    "beam-degeneracy",
];

pub fn run_suite(name: &str, scale: Scale) -> Result<SuiteReport> {
    let criterion = SUITES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{name}` (known: {})", SUITES.join(", "))))?
        + 1;
    let start = Instant::now();
    let checks = match criterion {
        1 => gradcheck(scale)?,
        2 => learning_signal(scale)?,
        3 => codebook_agnostic(scale)?,
        4 => zero_shot(scale)?,
        5 => ood_transfer(scale)?,
        6 => layer_gap(scale)?,
        7 => extra_unimodal(scale)?,
        8 => oracles::exact_oracles(scale)?,
        9 => oracles::invariants(scale)?,
        _ => oracles::beam_degeneracy(scale)?,
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(SuiteReport {
        suite: name.to_string(),
        criterion,
        passed: checks.iter().all(|c| c.passed || !c.gate),
        soft: criterion == 7,
        checks,
        seconds,
    })
}

fn gradcheck(scale: Scale) -> Result<Vec<Check>> {
    let start = Instant::now();
    let model = Model::new(ModelConfig::default(), 11)?;
    let coords = if scale == Scale::Full { 60 } else { 20 };
    let report = model.grad_check(12, coords, 1e-5, 5)?;
    Ok(vec![
        Check::at_most("max relative error", report.max_rel_error, 1e-4)
            .with_detail(format!("worst {:?} over {} coordinates", report.worst, report.coords_checked)),
        Check::at_least("coordinates", report.coords_checked as f64, if scale == Scale::Full { 50.0 } else { 1.0 }),
        Check::at_most("seconds", start.elapsed().as_secs_f64(), 60.0),
    ])
}

fn learning_signal(scale: Scale) -> Result<Vec<Check>> {
    let start = Instant::now();
    let generator = GeneratorConfig { seed: 21, ..Default::default() };
    let (n_train, n_test, updates, model_cfg) = match scale {
        Scale::Full => (400, 60, 2000, ModelConfig::default()),
        Scale::Smoke => (40, 10, 20, small_model()),
    };
    let train = generate_corpus(&generator, &CorpusSpec::new("pretrain", n_train, ProfileMix::AB_ONLY))?;
    let held_out = generate_corpus(&generator, &CorpusSpec::new("held-out", n_test, ProfileMix::AB_ONLY))?;
    let tc = TargetConfig { kmeans: KMeansConfig { k: model_cfg.n_clusters, seed: 3, ..Default::default() }, ..Default::default() };
    let targets = build_targets(None, &train, 1, &tc)?;
    let held_targets = held_out
        .utterances
        .iter()
        .map(|u| u.features_a.as_ref().map(|a| assign(&targets.codebook, a)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let model = Model::new(model_cfg.clone(), 4)?;
    let cfg = PretrainConfig { updates, seed: 5, ..Default::default() };
    let out = pretrain(model, &train, &targets.labels, &cfg)?;
    let acc = masked_accuracy(&out.model, &held_out, &held_targets, &cfg.mask, 6)?;
    let chance = 1.0 / model_cfg.n_clusters as f64;
    let mut checks = vec![Check::at_least("held-out masked accuracy", acc, 3.0 * chance)
        .with_detail(format!("chance {chance:.4}, final training loss {:.4}", out.log.last().map_or(f64::NAN, |r| r.loss)))];
    if scale == Scale::Full {
        checks.push(Check::at_most("seconds", start.elapsed().as_secs_f64(), 600.0));
    }
    Ok(checks)
}

pub(crate) fn small_model() -> ModelConfig {
    ModelConfig { frontend_dim: 16, embed_dim: 16, heads: 2, ffn_dim: 32, layers: 2, n_clusters: 8, ..Default::default() }
}

/// Study settings for the paired pre-training experiments.
pub fn study_config(scale: Scale) -> StudyConfig {
    let model = ModelConfig { frontend_dim: 32, embed_dim: 48, heads: 4, ffn_dim: 96, layers: 3, n_clusters: 40, ..Default::default() };
    let kmeans = KMeansConfig { k: 40, max_iters: 50, restarts: 2, max_frames: 20_000, seed: 0 };
    let full = StudyConfig {
        seeds: vec![1, 2, 3],
        generator: GeneratorConfig::default(),
        pretrain_utts: 300,
        extra_a_utts: 300,
        labeled_utts: 120,
        test_utts: 60,
        ood_utts: 120,
        ood_perturbation: 0.5,
        min_frames: 40,
        max_frames: 120,
        model,
        targets: TargetConfig { kmeans: kmeans.clone(), ..Default::default() },
        pretrain: PretrainConfig { updates: 4000, lr: 4e-3, frame_budget: 400, log_interval: 200, ..Default::default() },
        finetune: FinetuneConfig {
            updates: 400,
            n_frz: 200,
            l_frz: 0,
            lr: 1e-3,
            frame_budget: 800,
            noise: NoiseAugConfig::default(),
            schedule: LrSchedule::TriStage { warmup: 0.33, hold: 0.0, decay: 0.67 },
            log_interval: 100,
            ..Default::default()
        },
        decode: DecodeConfig::default(),
        analysis: AnalysisConfig { kmeans, ..Default::default() },
    };
    match scale {
        Scale::Full => full,
        Scale::Smoke => {
            let kmeans = KMeansConfig { k: 8, max_iters: 10, restarts: 1, max_frames: 2000, seed: 0 };
            StudyConfig {
                seeds: vec![1, 2, 3],
                pretrain_utts: 12,
                extra_a_utts: 6,
                labeled_utts: 8,
                test_utts: 6,
                ood_utts: 6,
                min_frames: 20,
                max_frames: 30,
                model: small_model(),
                targets: TargetConfig { kmeans: kmeans.clone(), ..Default::default() },
                pretrain: PretrainConfig { updates: 4, frame_budget: 100, log_interval: 2, mask: MaskConfig::default(), ..full.pretrain },
                finetune: FinetuneConfig { updates: 4, n_frz: 2, frame_budget: 100, log_interval: 2, ..full.finetune },
                analysis: AnalysisConfig { kmeans, ..Default::default() },
                ..full
            }
        }
    }
}

/// Paired models for every study seed, built once per scale and shared by
/// the suites that need them.
pub fn study(scale: Scale) -> Result<Arc<Vec<SeedRun>>> {
    static CACHE: Mutex<Vec<(Scale, Arc<Vec<SeedRun>>)>> = Mutex::new(Vec::new());
    let mut cache = CACHE.lock().unwrap_or_else(|e| e.into_inner());
    if let Some((_, runs)) = cache.iter().find(|(s, _)| *s == scale) {
        return Ok(runs.clone());
    }
    let cfg = study_config(scale);
    let runs = Arc::new(cfg.seeds.iter().map(|&s| cfg.run_seed(s)).collect::<Result<Vec<_>>>()?);
    cache.push((scale, runs.clone()));
    Ok(runs)
}

fn informational(checks: &mut [Check]) {
    for c in checks {
        c.gate = false;
    }
}

fn joint(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && *y).collect()
}

fn majority(name: &str, per_seed: &[bool]) -> Check {
    let hits = per_seed.iter().filter(|&&b| b).count();
    let need = per_seed.len() / 2 + 1;
    Check::at_least(name, hits as f64, need as f64).with_detail(format!("{hits} of {} seeds", per_seed.len()))
}

fn codebook_agnostic(scale: Scale) -> Result<Vec<Check>> {
    let cfg = study_config(scale);
    let runs = study(scale)?;
    let mut checks = Vec::new();
    let (mut drop_ok, mut collapse_ok) = (Vec::new(), Vec::new());
    for run in runs.iter() {
        let drop = cfg.analyze(&run.drop, &run.test, run.seed)?.matrix;
        let no_drop = cfg.analyze(&run.no_drop, &run.test, run.seed)?.matrix;
        let ratio = drop.min_column_ratio();
        drop_ok.push(ratio >= 0.85);
        let collapse = cross_collapse(&no_drop);
        collapse_ok.push(collapse <= 0.6);
        checks.push(Check::at_least(format!("seed {} dropout min/max column ratio", run.seed), ratio, 0.85).with_detail(compact(&drop)));
        checks.push(Check::at_most(format!("seed {} no-dropout B-codebook cross ratio", run.seed), collapse, 0.6).with_detail(compact(&no_drop)));
    }
    // Individual seeds may miss; the gate is the majority.
    informational(&mut checks);
    checks.push(majority("dropout keeps codebooks interchangeable", &drop_ok));
    checks.push(majority("no-dropout B codebook collapses on A features", &collapse_ok));
    informational(&mut checks);
    checks.push(majority("both patterns on the same seed", &joint(&drop_ok, &collapse_ok)));
    Ok(checks)
}

/// Matrix rows (union, AB, A, B codebooks) on one line.
fn compact(m: &crate::metrics::PnmiMatrix) -> String {
    format!("pnmi {:.3?}", m.values)
}

/// Smallest ratio of the B-source codebook's PNMI on AB or A features to the
/// matched codebook's PNMI on the same features.
pub fn cross_collapse(m: &crate::metrics::PnmiMatrix) -> f64 {
    use crate::clustering::CodebookSource;
    use crate::datagen::Profile;
    let on_ab = m.get(CodebookSource::B, Profile::AB) / m.get(CodebookSource::Av, Profile::AB);
    let on_a = m.get(CodebookSource::B, Profile::A) / m.get(CodebookSource::A, Profile::A);
    on_ab.min(on_a)
}

fn zero_shot(scale: Scale) -> Result<Vec<Check>> {
    let cfg = study_config(scale);
    let runs = study(scale)?;
    let conditions = [TestCondition::B, TestCondition::AbClean, TestCondition::AClean];
    let mut checks = Vec::new();
    let (mut transfer_ok, mut fusion_ok) = (Vec::new(), Vec::new());
    for run in runs.iter() {
        let d = cfg.finetune_a(&run.drop, &run.labeled, &run.test, run.seed, &conditions)?;
        let n = cfg.finetune_a(&run.no_drop, &run.labeled, &run.test, run.seed, &conditions)?;
        transfer_ok.push(d[0] <= 0.5 * n[0]);
        fusion_ok.push(d[1] <= 1.5 * d[2]);
        let detail = format!("dropout B/AB/A {:.3}/{:.3}/{:.3}, no-dropout {:.3}/{:.3}/{:.3}", d[0], d[1], d[2], n[0], n[1], n[2]);
        checks.push(Check::at_most(format!("seed {} B WER ratio dropout/no-dropout", run.seed), d[0] / n[0], 0.5).with_detail(detail));
        checks.push(Check::at_most(format!("seed {} dropout AB/A WER ratio", run.seed), d[1] / d[2], 1.5));
    }
    informational(&mut checks);
    checks.push(majority("zero-shot transfer to B", &transfer_ok));
    checks.push(majority("AB input no worse than 1.5x A input", &fusion_ok));
    informational(&mut checks);
    checks.push(majority("both patterns on the same seed", &joint(&transfer_ok, &fusion_ok)));
    Ok(checks)
}

fn ood_transfer(scale: Scale) -> Result<Vec<Check>> {
    let cfg = study_config(scale);
    let runs = study(scale)?;
    let mut checks = Vec::new();
    let mut ok = Vec::new();
    for run in runs.iter() {
        let ood = cfg.ood_corpus(run)?;
        let d = cfg.finetune_a(&run.drop, &ood, &run.test, run.seed, &[TestCondition::B])?[0];
        let n = cfg.finetune_a(&run.no_drop, &ood, &run.test, run.seed, &[TestCondition::B])?[0];
        ok.push(d <= 0.7 * n);
        checks.push(
            Check::at_most(format!("seed {} B WER ratio after out-of-domain tuning", run.seed), d / n, 0.7)
                .with_detail(format!("dropout {d:.3}, no-dropout {n:.3}")),
        );
    }
    informational(&mut checks);
    checks.push(majority("out-of-domain A labels still transfer to B", &ok));
    Ok(checks)
}

fn layer_gap(scale: Scale) -> Result<Vec<Check>> {
    let cfg = study_config(scale);
    let runs = study(scale)?;
    let mut checks = Vec::new();
    let (mut shrink_ok, mut contrast_ok) = (Vec::new(), Vec::new());
    for run in runs.iter() {
        let drop = cfg.analyze(&run.drop, &run.test, run.seed)?.layers.gaps();
        let no_drop = cfg.analyze(&run.no_drop, &run.test, run.seed)?.layers.gaps();
        let (first, last) = (drop[1], *drop.last().expect("layers"));
        let last_nd = *no_drop.last().expect("layers");
        shrink_ok.push(last <= first);
        contrast_ok.push(last_nd >= 2.0 * last);
        let detail = format!("dropout gaps {drop:.3?}, no-dropout gaps {no_drop:.3?}");
        checks.push(Check::at_most(format!("seed {} dropout final-layer gap minus layer-1 gap", run.seed), last - first, 0.0).with_detail(detail));
        checks.push(Check::at_least(format!("seed {} final-layer gap no-dropout/dropout", run.seed), last_nd / last, 2.0));
    }
    informational(&mut checks);
    checks.push(majority("dropout gap shrinks with depth", &shrink_ok));
    checks.push(majority("no-dropout final gap at least twice the dropout gap", &contrast_ok));
    informational(&mut checks);
    checks.push(majority("both patterns on the same seed", &joint(&shrink_ok, &contrast_ok)));
    Ok(checks)
}

fn extra_unimodal(scale: Scale) -> Result<Vec<Check>> {
    let cfg = study_config(scale);
    let runs = study(scale)?;
    let mut checks = Vec::new();
    let mut ok = Vec::new();
    for run in runs.iter() {
        let merged = run.pretrain_corpus.merged(&cfg.extra_a_corpus(run)?);
        let extra = cfg.pretrain_on(&merged, run.seed, crate::pretrain::ModalityDropoutConfig::DEFAULT)?;
        let base = cfg.finetune_a(&run.drop, &run.labeled, &run.test, run.seed, &[TestCondition::AClean])?[0];
        let with_extra = cfg.finetune_a(&extra, &run.labeled, &run.test, run.seed, &[TestCondition::AClean])?[0];
        ok.push(with_extra <= base);
        checks.push(
            Check::at_most(format!("seed {} A WER with extra A-only data minus AB-only", run.seed), with_extra - base, 0.0)
                .with_detail(format!("AB-only {base:.3}, with extra {with_extra:.3}")),
        );
    }
    informational(&mut checks);
    checks.push(majority("extra unimodal data does not hurt", &ok));
    Ok(checks)
}
