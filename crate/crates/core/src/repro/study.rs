//! Paired pre-training runs (with and without modality dropout) shared by
//! the transfer and codebook suites.

use serde::{Deserialize, Serialize};

use crate::clustering::{build_targets, TargetConfig};
use crate::datagen::{generate_corpus, make_ood_corpus, Corpus, CorpusSpec, GeneratorConfig, Profile, ProfileMix};
use crate::error::Result;
use crate::finetune::{evaluate, finetune, DecodeConfig, FinetuneConfig, TestCondition};
use crate::metrics::{cross_quantization_from_views, extract_views, layerwise_pnmi_from_views, AnalysisConfig, LayerwisePnmi, PnmiMatrix};
use crate::model::{Model, ModelConfig};
use crate::pretrain::{pretrain, ModalityDropoutConfig, PretrainConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
    pub pretrain_utts: usize,
    pub extra_a_utts: usize,
    pub labeled_utts: usize,
    pub test_utts: usize,
    pub ood_utts: usize,
    pub ood_perturbation: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub model: ModelConfig,
    pub targets: TargetConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub decode: DecodeConfig,
    pub analysis: AnalysisConfig,
}

/// Data and the paired pre-trained models for one seed.
pub struct SeedRun {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub pretrain_corpus: Corpus,
    pub labeled: Corpus,
    pub test: Corpus,
    pub drop: Model,
    pub no_drop: Model,
}

/// Codebook analysis of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookResult {
    pub matrix: PnmiMatrix,
    pub layers: LayerwisePnmi,
}

impl StudyConfig {
    fn spec(&self, name: &str, n: usize, mix: ProfileMix) -> CorpusSpec {
        CorpusSpec { name: name.into(), n_utts: n, min_frames: self.min_frames, max_frames: self.max_frames, mix }
    }

    pub fn generator_for(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig { seed: rng::sub_seed(seed, "study/generator"), ..self.generator.clone() }
    }

    /// Corpora and the paired models for `seed`.
    pub fn run_seed(&self, seed: u64) -> Result<SeedRun> {
        let generator = self.generator_for(seed);
        let pretrain_corpus = generate_corpus(&generator, &self.spec("pretrain", self.pretrain_utts, ProfileMix::AB_ONLY))?;
        let labeled = generate_corpus(&generator, &self.spec("labeled", self.labeled_utts, ProfileMix::AB_ONLY))?;
        let test = generate_corpus(&generator, &self.spec("test", self.test_utts, ProfileMix::AB_ONLY))?;
        let drop = self.pretrain_on(&pretrain_corpus, seed, ModalityDropoutConfig::DEFAULT)?;
        let no_drop = self.pretrain_on(&pretrain_corpus, seed, ModalityDropoutConfig::NONE)?;
        Ok(SeedRun { seed, generator, pretrain_corpus, labeled, test, drop, no_drop })
    }

    /// Anchor-stream targets, then one pre-training run. Model init, targets
    /// and batches depend only on `seed`, never on the dropout setting.
    pub fn pretrain_on(&self, corpus: &Corpus, seed: u64, dropout: ModalityDropoutConfig) -> Result<Model> {
        let mut tc = self.targets.clone();
        tc.kmeans.seed = rng::sub_seed(seed, "study/kmeans");
        let targets = build_targets(None, corpus, 1, &tc)?;
        let model = Model::new(self.model.clone(), rng::sub_seed(seed, "study/model"))?;
        let cfg = PretrainConfig { dropout, seed: rng::sub_seed(seed, "study/pretrain"), ..self.pretrain.clone() };
        Ok(pretrain(model, corpus, &targets.labels, &cfg)?.model)
    }

    pub fn analyze(&self, model: &Model, test: &Corpus, seed: u64) -> Result<CodebookResult> {
        let mut ac = self.analysis.clone();
        ac.kmeans.seed = rng::sub_seed(seed, "study/analysis");
        let views = extract_views(model, test, ac.frames_per_chunk)?;
        Ok(CodebookResult { matrix: cross_quantization_from_views(&views, &ac)?, layers: layerwise_pnmi_from_views(&views, &ac)? })
    }

    /// Fine-tune on A-only labels of `labeled` and return WER on `test`
    /// under each of `conditions`.
    pub fn finetune_a(&self, model: &Model, labeled: &Corpus, test: &Corpus, seed: u64, conditions: &[TestCondition]) -> Result<Vec<f64>> {
        let cfg = FinetuneConfig { modality: Profile::A, seed: rng::sub_seed(seed, "study/finetune"), ..self.finetune.clone() };
        let tuned = finetune(model, labeled, &cfg)?.model;
        let decode = DecodeConfig { seed: rng::sub_seed(seed, "study/decode"), ..self.decode.clone() };
        conditions.iter().map(|&c| Ok(evaluate(&tuned, test, c, &decode)?.wer)).collect()
    }

    pub fn ood_corpus(&self, run: &SeedRun) -> Result<Corpus> {
        make_ood_corpus(&run.generator, &self.spec("ood", self.ood_utts, ProfileMix::A_ONLY), self.ood_perturbation)
    }

    pub fn extra_a_corpus(&self, run: &SeedRun) -> Result<Corpus> {
        generate_corpus(&run.generator, &self.spec("extra", self.extra_a_utts, ProfileMix::A_ONLY))
    }
}
