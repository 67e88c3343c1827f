//! Supervised fine-tuning with partial modalities, layer freezing, decoding
//! and word-error-rate evaluation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{add_noise, collapse, Corpus, MultimodalUtterance, Profile};
use crate::error::{Error, Result};
use crate::model::{stage_of, BatchItem, Binder, ModalityInput, Model, Stage, Task};
use crate::numcore::{AdamState, Graph, Tensor};
use crate::pretrain::{apply_update, argmax, prepare, sample_modalities, BatchSampler, LrSchedule, ModalityDropoutConfig, NoiseAugConfig, StepRecord};
use crate::rng;

mod decode;
mod wer;
#[cfg(test)]
mod tests;

pub use decode::{beam_search, beam_search_all, greedy_decode, length_normalized, Hypothesis};
pub use wer::{align, wer, Alignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: Task,
    /// Streams carrying labels during fine-tuning.
    pub modality: Profile,
    /// Applied to AB utterances when `modality` is AB.
    pub dropout: ModalityDropoutConfig,
    pub noise: NoiseAugConfig,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub updates: usize,
    /// Updates during which only the task head trains.
    pub n_frz: usize,
    /// Encoder layers frozen for the whole run.
    pub l_frz: usize,
    pub frame_budget: usize,
    pub clip: f64,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: Task::FrameTranscription,
            modality: Profile::AB,
            dropout: ModalityDropoutConfig::DEFAULT,
            noise: NoiseAugConfig::default(),
            lr: 1e-3,
            schedule: LrSchedule::TriStage { warmup: 0.33, hold: 0.0, decay: 0.67 },
            updates: 3000,
            n_frz: 1500,
            l_frz: 0,
            frame_budget: 800,
            clip: 1.0,
            log_interval: 50,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        self.schedule.validate()?;
        self.dropout.validate()?;
        if self.l_frz > layers {
            return Err(Error::Config(format!("l_frz = {} exceeds the {layers} encoder layers", self.l_frz)));
        }
        if self.n_frz > self.updates {
            return Err(Error::Config(format!("n_frz = {} exceeds updates = {}", self.n_frz, self.updates)));
        }
        if self.frame_budget == 0 || self.log_interval == 0 || !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("frame_budget, log_interval, lr and clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.p_apply) || !self.noise.snr_db.is_finite() {
            return Err(Error::Config(format!("invalid noise augmentation {:?}", self.noise)));
        }
        Ok(())
    }
}

/// Whether parameter `name` stays fixed for the whole run.
pub fn permanently_frozen(name: &str, l_frz: usize, layers: usize) -> bool {
    match stage_of(name) {
        Stage::Input => l_frz >= 1,
        Stage::Block(i) => i < l_frz,
        Stage::FinalNorm => l_frz >= layers,
        Stage::Head => false,
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
}

fn usable(u: &MultimodalUtterance, modality: Profile) -> bool {
    u.frames > 0
        && !u.transcript.is_empty()
        && match modality {
            Profile::AB => u.profile() == Profile::AB,
            Profile::A => u.features_a.is_some(),
            Profile::B => u.features_b.is_some(),
        }
}

/// Replace the cluster head of `pretrained` with a task head and train it
/// on the labeled `corpus`.
pub fn finetune(pretrained: &Model, corpus: &Corpus, config: &FinetuneConfig) -> Result<FinetuneOutcome> {
    let layers = pretrained.config.layers;
    config.validate(layers)?;
    if config.modality.has_b() && !pretrained.has_frontend_b() {
        return Err(Error::InvalidArgument("fine-tuning on modality B needs a model with a B frontend".into()));
    }
    if config.modality.has_a() && !pretrained.has_frontend_a() {
        return Err(Error::InvalidArgument("fine-tuning on modality A needs a model with an A frontend".into()));
    }
    let mut model = pretrained.with_task_head(config.task, rng::sub_seed(config.seed, "finetune/head"))?;
    let eligible: Vec<usize> = (0..corpus.len()).filter(|&i| usable(&corpus.utterances[i], config.modality)).collect();
    if eligible.is_empty() && config.updates > 0 {
        return Err(Error::InvalidArgument(format!("no utterance of `{}` carries {} labels", corpus.name, config.modality.as_str())));
    }
    let head_only: Vec<bool> = model.params.iter().map(|(_, n, _)| stage_of(n) == Stage::Head).collect();
    let unfrozen: Vec<bool> = model.params.iter().map(|(_, n, _)| !permanently_frozen(n, config.l_frz, layers)).collect();
    let frames: Vec<usize> = corpus.utterances.iter().map(|u| u.frames).collect();
    let mut sampler = BatchSampler::new(eligible, frames, config.seed, "finetune/batch");
    let mut modality_rng = rng::stream(config.seed, "finetune/modality");
    let mut noise_rng = rng::stream(config.seed, "finetune/noise");
    let mut optimizer = AdamState::default();
    let mut log = Vec::new();
    let (mut sum_loss, mut sum_acc, mut since) = (0.0, 0.0, 0usize);
    for step in 0..config.updates {
        let lr = config.schedule.lr(step, config.updates, config.lr);
        let batch = sampler.next(config.frame_budget);
        let mut prepared = Vec::with_capacity(batch.len());
        for &i in &batch {
            let u = &corpus.utterances[i];
            let present = match config.modality {
                Profile::AB => sample_modalities(&config.dropout, Profile::AB, &mut modality_rng),
                p => p,
            };
            prepared.push(prepare(u, present, &config.noise, &mut noise_rng)?);
        }
        let items = prepared.iter().map(|p| Ok(BatchItem { input: p.input()?, mask: &[] })).collect::<Result<Vec<_>>>()?;
        let trainable = if step < config.n_frz { &head_only } else { &unfrozen };
        let mut g = Graph::new();
        let mut b = Binder::new(&model.params, trainable);
        let nodes = model.encode_batch(&mut g, &mut b, &items)?;
        let (loss, acc) = match config.task {
            Task::FrameTranscription => {
                let logits = model.frame_logits_node(&mut g, &mut b, nodes.final_features)?;
                let targets: Vec<usize> = batch.iter().flat_map(|&i| corpus.utterances[i].unit_labels.iter().copied()).collect();
                let loss = g.cross_entropy(logits, &targets, &vec![1.0; targets.len()])?;
                let lv = g.value(logits);
                let hits = targets.iter().enumerate().filter(|&(r, &t)| argmax(lv.row(r)) == t).count();
                (loss, hits as f64 / targets.len() as f64)
            }
            Task::Seq2Seq => {
                let mut inputs = Vec::with_capacity(batch.len());
                let mut targets = Vec::new();
                for &i in &batch {
                    let t = &corpus.utterances[i].transcript;
                    let mut seq = vec![model.bos()];
                    seq.extend_from_slice(t);
                    inputs.push(seq);
                    targets.extend_from_slice(t);
                    targets.push(model.eos());
                }
                let memory: Vec<(usize, usize)> = nodes.segments.iter().map(|s| (s.q_start, s.q_len)).collect();
                let seqs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
                let lp = model.decoder_log_probs_node(&mut g, &mut b, nodes.final_features, &memory, &seqs)?;
                let loss = g.cross_entropy(lp, &targets, &vec![1.0; targets.len()])?;
                let lv = g.value(lp);
                let hits = targets.iter().enumerate().filter(|&(r, &t)| argmax(lv.row(r)) == t).count();
                (loss, hits as f64 / targets.len() as f64)
            }
        };
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step, utterances: batch.iter().map(|&i| corpus.utterances[i].id.clone()).collect() });
        }
        let grads = g.backward(loss)?;
        drop(b);
        let grad_norm = apply_update(&mut model.params, &mut optimizer, grads, lr, config.clip)?;
        sum_loss += loss_value;
        sum_acc += acc;
        since += 1;
        let done = step + 1;
        if done % config.log_interval == 0 || done == config.updates {
            log.push(StepRecord { step: done, loss: sum_loss / since as f64, masked_acc: sum_acc / since as f64, lr, grad_norm });
            (sum_loss, sum_acc, since) = (0.0, 0.0, 0);
        }
    }
    Ok(FinetuneOutcome { model, log })
}

/// Input condition of an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestCondition {
    AbClean,
    AbNoisy,
    AClean,
    ANoisy,
    B,
}

impl TestCondition {
    pub const ALL: [TestCondition; 5] =
        [TestCondition::AbClean, TestCondition::AbNoisy, TestCondition::AClean, TestCondition::ANoisy, TestCondition::B];

    pub fn new(profile: Profile, noisy: bool) -> Self {
        match (profile, noisy) {
            (Profile::AB, false) => TestCondition::AbClean,
            (Profile::AB, true) => TestCondition::AbNoisy,
            (Profile::A, false) => TestCondition::AClean,
            (Profile::A, true) => TestCondition::ANoisy,
            (Profile::B, _) => TestCondition::B,
        }
    }

    pub fn profile(self) -> Profile {
        match self {
            TestCondition::AbClean | TestCondition::AbNoisy => Profile::AB,
            TestCondition::AClean | TestCondition::ANoisy => Profile::A,
            TestCondition::B => Profile::B,
        }
    }

    /// Noise is added to modality A only.
    pub fn noisy(self) -> bool {
        matches!(self, TestCondition::AbNoisy | TestCondition::ANoisy)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TestCondition::AbClean => "ab-clean",
            TestCondition::AbNoisy => "ab-noisy",
            TestCondition::AClean => "a-clean",
            TestCondition::ANoisy => "a-noisy",
            TestCondition::B => "b",
        }
    }
}

impl fmt::Display for TestCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How sequence-decoder models turn features into tokens. Frame heads
/// always take the per-frame argmax and collapse repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// `None` decodes greedily.
    pub beam: Option<usize>,
    pub alpha: f64,
    /// Longest hypothesis; defaults to the utterance frame count.
    pub max_len: Option<usize>,
    pub noise_snr_db: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: None, alpha: 1.0, max_len: None, noise_snr_db: 0.0, seed: 0 }
    }
}

/// Scores of one test condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub condition: TestCondition,
    /// Corpus-level rate: total edits over total reference tokens.
    pub wer: f64,
    /// Aligned hits over total reference tokens.
    pub token_accuracy: f64,
    pub utterances: usize,
    /// Hypotheses stopped at the length limit.
    pub forced: usize,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn get(&self, condition: TestCondition) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.condition == condition)
    }

    pub fn wer(&self, condition: TestCondition) -> f64 {
        self.get(condition).map_or(f64::NAN, |e| e.wer)
    }

    pub fn mean_wer(&self) -> f64 {
        self.entries.iter().map(|e| e.wer).sum::<f64>() / self.entries.len().max(1) as f64
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
    }
}

/// Token sequence a model produces for one input.
pub fn transcribe(model: &Model, input: ModalityInput, decode: &DecodeConfig) -> Result<(Vec<usize>, bool)> {
    let frames = input.frames()?;
    let features = model.encode(input, None)?.final_features;
    if model.has_frame_head() {
        let logits = model.frame_logits(&features)?;
        let path: Vec<usize> = (0..frames).map(|t| argmax(logits.row(t))).collect();
        return Ok((collapse(&path), false));
    }
    let max_len = decode.max_len.unwrap_or(frames + 1);
    let hyp = match decode.beam {
        None => greedy_decode(model, &features, max_len)?,
        Some(b) => beam_search(model, &features, b, decode.alpha, max_len)?,
    };
    Ok((hyp.content(model.eos()).to_vec(), hyp.forced))
}

/// Corpus-level WER of `model` under one test condition.
pub fn evaluate(model: &Model, corpus: &Corpus, condition: TestCondition, decode: &DecodeConfig) -> Result<EvalEntry> {
    let profile = condition.profile();
    if corpus.utterances.iter().any(|u| (profile.has_a() && u.features_a.is_none()) || (profile.has_b() && u.features_b.is_none())) {
        return Err(Error::InvalidArgument(format!("corpus `{}` lacks streams for condition {condition}", corpus.name)));
    }
    let scored: Vec<Result<(Alignment, bool)>> = corpus
        .utterances
        .par_iter()
        .filter(|u| !u.transcript.is_empty())
        .map(|u| {
            let a = match (&u.features_a, profile.has_a()) {
                (Some(a), true) if condition.noisy() => {
                    let mut r = rng::stream(decode.seed, &format!("eval/noise/{}", u.id));
                    Some(add_noise(a, decode.noise_snr_db, 1.0, &mut r)?.0)
                }
                (Some(a), true) => Some(a.clone()),
                _ => None,
            };
            let b = if profile.has_b() { u.features_b.as_ref() } else { None };
            let (hyp, forced) = transcribe(model, ModalityInput::new(a.as_ref(), b)?, decode)?;
            Ok((align(&u.transcript, &hyp), forced))
        })
        .collect();
    let (mut edits, mut hits, mut total, mut forced, mut n) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for s in scored {
        let (al, f) = s?;
        edits += al.edits();
        hits += al.hits;
        total += al.reference_len();
        forced += usize::from(f);
        n += 1;
    }
    if total == 0 {
        return Err(Error::InvalidArgument(format!("corpus `{}` has no reference tokens", corpus.name)));
    }
    Ok(EvalEntry {
        condition,
        wer: edits as f64 / total as f64,
        token_accuracy: hits as f64 / total as f64,
        utterances: n,
        forced,
        decode: decode.clone(),
    })
}

/// Evaluate on each of `conditions`.
pub fn evaluate_conditions(model: &Model, corpus: &Corpus, conditions: &[TestCondition], decode: &DecodeConfig) -> Result<EvalReport> {
    Ok(EvalReport { entries: conditions.iter().map(|&c| evaluate(model, corpus, c, decode)).collect::<Result<_>>()? })
}

/// Fine-tuning profile (row) by test condition (column) results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub rows: Vec<(Profile, EvalReport)>,
}

impl TransferMatrix {
    pub fn row(&self, profile: Profile) -> Option<&EvalReport> {
        self.rows.iter().find(|(p, _)| *p == profile).map(|(_, r)| r)
    }

    pub fn averages(&self) -> Vec<(Profile, f64)> {
        self.rows.iter().map(|(p, r)| (*p, r.mean_wer())).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("finetune,ab-clean,ab-noisy,a-clean,a-noisy,b,average\n");
        for (p, r) in &self.rows {
            let cells: Vec<String> = TestCondition::ALL.iter().map(|&c| format!("{:.6}", r.wer(c))).collect();
            out.push_str(&format!("{},{},{:.6}\n", p.as_str(), cells.join(","), r.mean_wer()));
        }
        out
    }
}

/// Fine-tune `model` on AB, A-only and B-only labels and evaluate each
/// result on all five test conditions.
pub fn transfer_matrix(
    model: &Model,
    train: &Corpus,
    test: &Corpus,
    base: &FinetuneConfig,
    decode: &DecodeConfig,
) -> Result<TransferMatrix> {
    let mut rows = Vec::new();
    for profile in [Profile::AB, Profile::A, Profile::B] {
        let cfg = FinetuneConfig { modality: profile, ..base.clone() };
        let tuned = finetune(model, train, &cfg)?.model;
        rows.push((profile, evaluate_conditions(&tuned, test, &TestCondition::ALL, decode)?));
    }
    Ok(TransferMatrix { rows })
}

/// Encoder parameter values that a fine-tuning run must leave untouched.
pub fn frozen_snapshot(model: &Model, l_frz: usize) -> Vec<(String, Tensor)> {
    model
        .params
        .iter()
        .filter(|(_, n, _)| permanently_frozen(n, l_frz, model.config.layers))
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect()
}
