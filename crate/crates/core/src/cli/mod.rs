//! Experiment configuration, run directories and the subcommand
//! implementations behind the `uhubert` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clustering::{build_targets, write_codebook, TargetConfig, Targets};
use crate::datagen::{generate_corpus, make_ood_corpus, read_corpus, write_corpus, Corpus, CorpusSpec, GeneratorConfig, Profile, ProfileMix};
use crate::error::{Error, Result};
use crate::finetune::{evaluate_conditions, finetune, DecodeConfig, EvalReport, FinetuneConfig, TestCondition};
use crate::metrics::{extract_views, cross_quantization_from_views, layerwise_pnmi_from_views, project_views, AnalysisConfig};
use crate::model::{Model, ModelConfig};
use crate::pretrain::{pretrain_with, PretrainConfig, StepRecord};
use crate::repro;
use crate::rng;

mod checkpoint;

pub use checkpoint::{build_tag, load_checkpoint, save_checkpoint, Checkpoint, HeadKind, Provenance, CHECKPOINT_VERSION};

/// Corpora generated by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Unlabeled pre-training data.
    pub pretrain: CorpusSpec,
    /// Labeled fine-tuning data.
    pub labeled: CorpusSpec,
    pub test: CorpusSpec,
    /// Labeled out-of-domain data.
    pub ood: CorpusSpec,
    pub ood_perturbation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain: CorpusSpec::new("pretrain", 400, ProfileMix::AB_ONLY),
            labeled: CorpusSpec::new("labeled", 150, ProfileMix::AB_ONLY),
            test: CorpusSpec::new("test", 60, ProfileMix::AB_ONLY),
            ood: CorpusSpec::new("ood", 150, ProfileMix::A_ONLY),
            ood_perturbation: 0.5,
        }
    }
}

impl DataConfig {
    fn specs(&self) -> [&CorpusSpec; 4] {
        [&self.pretrain, &self.labeled, &self.test, &self.ood]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub frames: usize,
    pub coords: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { frames: 12, coords: 60, eps: 1e-5, tolerance: 1e-4 }
    }
}

/// One file that fully defines an experiment.
///
/// Section-level `seed` fields are ignored: every component seed is derived
/// from the global `seed` and a fixed purpose string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub targets: TargetConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub decode: DecodeConfig,
    pub analysis: AnalysisConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            generator: GeneratorConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            targets: TargetConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            decode: DecodeConfig::default(),
            analysis: AnalysisConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
        .resolved()
    }
}

impl ExperimentConfig {
    /// Parse, derive component seeds and validate.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Copy with every component seed derived from the global seed.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.generator.seed = rng::sub_seed(s, "generator");
        self.targets.kmeans.seed = rng::sub_seed(s, "targets/kmeans");
        self.pretrain.seed = rng::sub_seed(s, "pretrain");
        self.finetune.seed = rng::sub_seed(s, "finetune");
        self.decode.seed = rng::sub_seed(s, "decode");
        self.analysis.kmeans.seed = rng::sub_seed(s, "analysis/kmeans");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.targets.kmeans.validate()?;
        self.analysis.kmeans.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate(self.model.layers)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.targets.kmeans.k != self.model.n_clusters {
            return bad(format!("targets.kmeans.k = {} but model.n_clusters = {}", self.targets.kmeans.k, self.model.n_clusters));
        }
        let g = &self.generator;
        if (self.model.dim_a > 0 && self.model.dim_a != g.dim_a) || (self.model.dim_b > 0 && self.model.dim_b != g.dim_b) {
            return bad(format!("model input widths ({}, {}) differ from the data ({}, {})", self.model.dim_a, self.model.dim_b, g.dim_a, g.dim_b));
        }
        if self.model.n_units != g.n_units {
            return bad(format!("model.n_units = {} but the data has {} units", self.model.n_units, g.n_units));
        }
        for spec in self.data.specs() {
            if spec.min_frames == 0 || spec.min_frames > spec.max_frames || spec.n_utts == 0 {
                return bad(format!("corpus `{}` needs 1 <= min_frames <= max_frames and n_utts >= 1", spec.name));
            }
        }
        if !(self.data.ood_perturbation >= 0.0) {
            return bad("data.ood_perturbation must be non-negative".into());
        }
        if self.decode.beam == Some(0) || !(self.decode.alpha >= 0.0) {
            return bad("decode.beam must be >= 1 and decode.alpha >= 0".into());
        }
        if self.gradcheck.coords == 0 || self.gradcheck.frames == 0 || !(self.gradcheck.eps > 0.0) {
            return bad("gradcheck needs positive frames, coords and eps".into());
        }
        Ok(())
    }

    /// Fingerprint of the resolved configuration, not counting where outputs go.
    pub fn hash(&self) -> String {
        let cfg = ExperimentConfig { output_dir: PathBuf::new(), ..self.clone() };
        rng::fingerprint(serde_json::to_string(&cfg).expect("serializable").as_bytes())
    }
}

/// A run directory plus its manifest.
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub args: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub build: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub commands: Vec<ManifestEntry>,
}

impl Run {
    pub fn new(config: ExperimentConfig) -> Result<Run> {
        config.validate()?;
        let dir = config.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run { config, dir })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Append a command record. A run directory belongs to one configuration.
    fn record(&self, command: &str, args: serde_json::Value, outputs: &[PathBuf]) -> Result<()> {
        let hash = self.config.hash();
        let mut manifest = match self.read_manifest()? {
            Some(m) if m.config_hash != hash => {
                return Err(Error::Config(format!(
                    "{} belongs to a different configuration (hash {})",
                    self.dir.display(),
                    m.config_hash
                )))
            }
            Some(m) => m,
            None => Manifest { build: build_tag(), config_hash: hash, config: self.config.clone(), commands: Vec::new() },
        };
        manifest.commands.push(ManifestEntry { command: command.into(), args, outputs: outputs.to_vec() });
        let path = self.manifest_path();
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(|e| Error::io(&path, e))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn corpus_or_default(&self, corpus: Option<&Path>, default: &str) -> Result<Corpus> {
        match corpus {
            Some(p) => read_corpus(p),
            None => read_corpus(&self.path(&format!("corpora/{default}"))),
        }
    }

    fn load(&self, path: &Path) -> Result<Checkpoint> {
        load_checkpoint(path, Some(&self.config.model))
    }

    /// Generate every configured corpus under `corpora/`.
    pub fn cmd_gen_data(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let mut outputs = Vec::new();
        for spec in [&cfg.data.pretrain, &cfg.data.labeled, &cfg.data.test] {
            let corpus = generate_corpus(&cfg.generator, spec)?;
            let dir = self.path(&format!("corpora/{}", spec.name));
            write_corpus(&dir, &corpus)?;
            outputs.push(dir);
        }
        let ood = make_ood_corpus(&cfg.generator, &cfg.data.ood, cfg.data.ood_perturbation)?;
        let dir = self.path(&format!("corpora/{}", cfg.data.ood.name));
        write_corpus(&dir, &ood)?;
        outputs.push(dir);
        self.record("gen-data", json!({}), &outputs)?;
        Ok(outputs)
    }

    /// Fit a codebook and write it with per-utterance assignments. Without a
    /// checkpoint the raw anchor stream is clustered.
    pub fn cmd_cluster(&self, checkpoint: Option<&Path>, corpus: Option<&Path>, k: Option<usize>, out: Option<&Path>) -> Result<Vec<PathBuf>> {
        let data = self.corpus_or_default(corpus, &self.config.data.pretrain.name)?;
        let mut tc = self.config.targets.clone();
        if let Some(k) = k {
            tc.kmeans.k = k;
        }
        let targets = match checkpoint {
            None => build_targets(None, &data, 1, &tc)?,
            Some(p) => build_targets(Some(&self.load(p)?.model), &data, 2, &tc)?,
        };
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(if checkpoint.is_some() { "targets/model" } else { "targets/raw" }));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let codebook = dir.join("codebook.umkm");
        write_codebook(&codebook, &targets.codebook)?;
        let assignments = dir.join("assignments.jsonl");
        write_assignments(&assignments, &data, &targets)?;
        let outputs = vec![codebook, assignments];
        self.record("cluster", json!({ "checkpoint": checkpoint, "corpus": corpus, "k": tc.kmeans.k, "skipped": targets.skipped.len() }), &outputs)?;
        Ok(outputs)
    }

    /// Pre-train a fresh model on the assignments in `targets`.
    pub fn cmd_pretrain(&self, corpus: Option<&Path>, targets: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
        let data = self.corpus_or_default(corpus, &self.config.data.pretrain.name)?;
        let labels = read_assignments(targets, &data)?;
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| self.path("pretrain"));
        let model = Model::new(self.config.model.clone(), rng::sub_seed(self.config.seed, "pretrain/model"))?;
        let hash = self.config.hash();
        let mut save = |step: usize, m: &Model, opt: &crate::numcore::AdamState| -> Result<()> {
            let ck = Checkpoint::new(m.clone(), Some(opt.clone()), Provenance::new(hash.clone(), step as u64));
            save_checkpoint(&dir.join(format!("step-{step}.ckpt")), &ck)
        };
        let outcome = pretrain_with(model, &data, &labels, &self.config.pretrain, 0, &mut save)?;
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(
            &ckpt,
            &Checkpoint::new(outcome.model, Some(outcome.optimizer), Provenance::new(self.config.hash(), self.config.pretrain.updates as u64)),
        )?;
        let log = dir.join("log.jsonl");
        self.write(&log, &jsonl(&outcome.log))?;
        let outputs = vec![ckpt, log];
        self.record("pretrain", json!({ "corpus": corpus, "targets": targets }), &outputs)?;
        Ok(outputs)
    }

    pub fn cmd_finetune(&self, checkpoint: &Path, corpus: Option<&Path>, config: &FinetuneConfig, out: Option<&Path>) -> Result<Vec<PathBuf>> {
        config.validate(self.config.model.layers)?;
        let data = self.corpus_or_default(corpus, &self.config.data.labeled.name)?;
        let pretrained = self.load(checkpoint)?.model;
        let outcome = finetune(&pretrained, &data, config)?;
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(&format!("finetune/{}", config.modality.as_str().to_lowercase())));
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(&ckpt, &Checkpoint::new(outcome.model, None, Provenance::new(self.config.hash(), config.updates as u64)))?;
        let log = dir.join("log.jsonl");
        self.write(&log, &jsonl(&outcome.log))?;
        let outputs = vec![ckpt, log];
        self.record("finetune", json!({ "checkpoint": checkpoint, "corpus": corpus, "config": config }), &outputs)?;
        Ok(outputs)
    }

    pub fn cmd_evaluate(
        &self,
        checkpoint: &Path,
        corpus: Option<&Path>,
        conditions: &[TestCondition],
        decode: &DecodeConfig,
        out: Option<&Path>,
    ) -> Result<(EvalReport, PathBuf)> {
        let data = self.corpus_or_default(corpus, &self.config.data.test.name)?;
        let model = self.load(checkpoint)?.model;
        let report = evaluate_conditions(&model, &data, conditions, decode)?;
        let path = out.map(Path::to_path_buf).unwrap_or_else(|| self.path("eval.jsonl"));
        self.write(&path, &report.to_jsonl())?;
        self.record("evaluate", json!({ "checkpoint": checkpoint, "corpus": corpus, "conditions": conditions, "decode": decode }), &[path.clone()])?;
        Ok((report, path))
    }

    /// Cross-quantization matrix and per-layer tables.
    pub fn cmd_pnmi(&self, checkpoint: &Path, corpus: Option<&Path>, k: Option<usize>, out: Option<&Path>) -> Result<Vec<PathBuf>> {
        let data = self.corpus_or_default(corpus, &self.config.data.test.name)?;
        let model = self.load(checkpoint)?.model;
        let mut ac = self.config.analysis.clone();
        if let Some(k) = k {
            ac.kmeans.k = k;
        }
        let views = extract_views(&model, &data, ac.frames_per_chunk)?;
        let matrix = cross_quantization_from_views(&views, &ac)?;
        let layers = layerwise_pnmi_from_views(&views, &ac)?;
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| self.path("pnmi"));
        let outputs = vec![dir.join("pnmi.csv"), dir.join("layerwise.csv"), dir.join("pnmi.json")];
        self.write(&outputs[0], &matrix.to_csv())?;
        self.write(&outputs[1], &layers.to_csv())?;
        let summary = json!({
            "matrix": matrix,
            "min_column_ratio": matrix.min_column_ratio(),
            "cross_modal_gap": matrix.cross_modal_gap(),
            "layer_gaps": layers.gaps(),
        });
        self.write(&outputs[2], &serde_json::to_string_pretty(&summary).expect("serializable"))?;
        self.record("pnmi", json!({ "checkpoint": checkpoint, "corpus": corpus, "k": ac.kmeans.k }), &outputs)?;
        Ok(outputs)
    }

    pub fn cmd_project(&self, checkpoint: &Path, corpus: Option<&Path>, out: Option<&Path>) -> Result<Vec<PathBuf>> {
        let data = self.corpus_or_default(corpus, &self.config.data.test.name)?;
        let model = self.load(checkpoint)?.model;
        let views = extract_views(&model, &data, self.config.analysis.frames_per_chunk)?;
        let export = project_views(&views, self.config.analysis.projection_frames, rng::sub_seed(self.config.seed, "project"))?;
        let path = out.map(Path::to_path_buf).unwrap_or_else(|| self.path("projection.csv"));
        self.write(&path, &export.to_csv())?;
        self.record("project", json!({ "checkpoint": checkpoint, "corpus": corpus, "separation": export.modality_separation() }), &[path.clone()])?;
        Ok(vec![path])
    }

    /// Gradient check of the configured model; returns the worst relative error.
    pub fn cmd_gradcheck(&self) -> Result<(f64, bool)> {
        let gc = &self.config.gradcheck;
        let model = Model::new(self.config.model.clone(), rng::sub_seed(self.config.seed, "gradcheck/model"))?;
        let report = model.grad_check(gc.frames, gc.coords, gc.eps, rng::sub_seed(self.config.seed, "gradcheck"))?;
        let pass = report.max_rel_error < gc.tolerance;
        let path = self.path("gradcheck.json");
        let summary = json!({
            "max_rel_error": report.max_rel_error,
            "coords": report.coords_checked,
            "worst": report.worst,
            "pass": pass,
        });
        self.write(&path, &serde_json::to_string_pretty(&summary).expect("serializable"))?;
        self.record("gradcheck", json!({}), &[path])?;
        Ok((report.max_rel_error, pass))
    }

    pub fn cmd_repro(&self, suite: &str, scale: repro::Scale) -> Result<repro::SuiteReport> {
        let report = repro::run_suite(suite, scale)?;
        let path = self.path(&format!("repro/{suite}.json"));
        self.write(&path, &serde_json::to_string_pretty(&report).expect("serializable"))?;
        self.record("repro", json!({ "suite": suite, "scale": scale, "passed": report.passed }), &[path])?;
        Ok(report)
    }
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentRecord {
    id: String,
    labels: Option<Vec<usize>>,
}

fn write_assignments(path: &Path, corpus: &Corpus, targets: &Targets) -> Result<()> {
    let records: Vec<AssignmentRecord> = corpus
        .utterances
        .iter()
        .zip(&targets.labels)
        .map(|(u, l)| AssignmentRecord { id: u.id.clone(), labels: l.clone() })
        .collect();
    fs::write(path, jsonl(&records)).map_err(|e| Error::io(path, e))
}

/// Read per-utterance targets, in corpus order.
pub fn read_assignments(path: &Path, corpus: &Corpus) -> Result<Vec<Option<Vec<usize>>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<AssignmentRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect::<Result<_>>()?;
    if records.len() != corpus.len() || records.iter().zip(&corpus.utterances).any(|(r, u)| r.id != u.id) {
        return Err(Error::format(path, format!("assignments do not match corpus `{}`", corpus.name)));
    }
    Ok(records.into_iter().map(|r| r.labels).collect())
}

/// Parse a modality flag value.
pub fn parse_profile(s: &str) -> Result<Profile> {
    Profile::parse(s).ok_or_else(|| Error::InvalidArgument(format!("unknown modality `{s}` (expected ab, a or b)")))
}

/// Per-step records of a log file.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string()))).collect()
}

/// Process exit code of a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}
