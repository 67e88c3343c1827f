//! Masked cluster prediction with modality dropout.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_targets, Codebook, TargetConfig, Targets};
use crate::datagen::{add_noise, Corpus, MultimodalUtterance, Profile};
use crate::error::{Error, Result};
use crate::model::{BatchItem, Binder, ModalityInput, Model, ModelConfig};
use crate::numcore::{clip_grad_norm, AdamState, Graph, NodeId, ParamStore, Tensor};
use crate::rng;

mod schedule;

pub use schedule::LrSchedule;

/// Probabilities of presenting both streams, only A, or only B for an AB
/// utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityDropoutConfig {
    pub p_av: f64,
    pub p_a: f64,
    pub p_b: f64,
}

impl ModalityDropoutConfig {
    /// Always both streams, i.e. no modality dropout.
    pub const NONE: ModalityDropoutConfig = ModalityDropoutConfig { p_av: 1.0, p_a: 0.0, p_b: 0.0 };
    /// Each stream dropped with probability 0.25.
    pub const DEFAULT: ModalityDropoutConfig = ModalityDropoutConfig { p_av: 0.5, p_a: 0.25, p_b: 0.25 };

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_av, self.p_a, self.p_b];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("modality dropout probabilities {ps:?} must lie in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

impl Default for ModalityDropoutConfig {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Streams to present for one utterance. Unimodal utterances keep their
/// single stream and consume no randomness.
pub fn sample_modalities<R: Rng + ?Sized>(config: &ModalityDropoutConfig, profile: Profile, r: &mut R) -> Profile {
    if profile != Profile::AB {
        return profile;
    }
    let u: f64 = r.random();
    if u < config.p_av {
        Profile::AB
    } else if u < config.p_av + config.p_a {
        Profile::A
    } else {
        Profile::B
    }
}

/// Span-masking parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Probability that a frame starts a masked span.
    pub p_mask: f64,
    /// Span length in frames.
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { p_mask: 0.08, span: 5 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_mask) || self.span == 0 {
            return Err(Error::Config(format!("invalid mask parameters {self:?}")));
        }
        Ok(())
    }
}

/// Sorted frame indices covered by randomly started spans of length `span`.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, p_mask: f64, span: usize, r: &mut R) -> Vec<usize> {
    let mut covered = vec![false; frames];
    for t in 0..frames {
        if r.random_bool(p_mask) {
            covered[t..(t + span).min(frames)].iter_mut().for_each(|c| *c = true);
        }
    }
    (0..frames).filter(|&t| covered[t]).collect()
}

/// Mean cross-entropy and argmax accuracy over the masked frames of one
/// utterance; `None` when the mask is empty.
pub fn masked_prediction_loss(logits: &Tensor, targets: &[usize], mask: &[usize]) -> Result<Option<(f64, f64)>> {
    let (t, k) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::shape("masked_prediction_loss", format!("{} targets for {t} frames", targets.len())));
    }
    if mask.is_empty() {
        return Ok(None);
    }
    let mut loss = 0.0;
    let mut hits = 0;
    for &i in mask {
        if i >= t || targets[i] >= k {
            return Err(Error::InvalidArgument(format!("mask index {i} or its target out of range")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[targets[i]];
        if argmax(row) == targets[i] {
            hits += 1;
        }
    }
    Ok(Some((loss / mask.len() as f64, hits as f64 / mask.len() as f64)))
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Modality-A noise augmentation during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseAugConfig {
    pub p_apply: f64,
    pub snr_db: f64,
}

impl Default for NoiseAugConfig {
    fn default() -> Self {
        NoiseAugConfig { p_apply: 0.25, snr_db: 0.0 }
    }
}

impl NoiseAugConfig {
    pub const OFF: NoiseAugConfig = NoiseAugConfig { p_apply: 0.0, snr_db: 0.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub updates: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Total frames per update; utterances are packed until it is reached.
    pub frame_budget: usize,
    pub dropout: ModalityDropoutConfig,
    pub mask: MaskConfig,
    pub noise: NoiseAugConfig,
    /// Loss weight of unmasked frames (0 = masked frames only).
    pub unmasked_weight: f64,
    pub clip: f64,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            updates: 2000,
            lr: 2e-3,
            schedule: LrSchedule::WarmupLinearDecay { warmup: 0.08 },
            frame_budget: 800,
            dropout: ModalityDropoutConfig::DEFAULT,
            mask: MaskConfig::default(),
            noise: NoiseAugConfig::default(),
            unmasked_weight: 0.0,
            clip: 1.0,
            log_interval: 50,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.dropout.validate()?;
        self.mask.validate()?;
        if self.frame_budget == 0 || self.log_interval == 0 {
            return Err(Error::Config("frame_budget and log_interval must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) || !(self.unmasked_weight >= 0.0) {
            return Err(Error::Config("lr and clip must be positive, unmasked_weight non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.p_apply) || !self.noise.snr_db.is_finite() {
            return Err(Error::Config(format!("invalid noise augmentation {:?}", self.noise)));
        }
        Ok(())
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean loss and masked-frame accuracy since the previous record.
    pub loss: f64,
    pub masked_acc: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    pub log: Vec<StepRecord>,
    /// Utterance draws whose mask came out empty.
    pub skipped_empty_mask: usize,
}

/// Cycles through utterance indices in seeded shuffled epochs, packing each
/// batch up to a frame budget.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    frames: Vec<usize>,
    pos: usize,
    rng: rng::Rng,
}

impl BatchSampler {
    pub(crate) fn new(eligible: Vec<usize>, frames: Vec<usize>, seed: u64, purpose: &str) -> Self {
        BatchSampler { order: eligible, frames, pos: usize::MAX, rng: rng::stream(seed, purpose) }
    }

    pub(crate) fn next(&mut self, budget: usize) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut total = 0;
        loop {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            if !batch.is_empty() && (total + self.frames[i] > budget || batch.contains(&i)) {
                break;
            }
            batch.push(i);
            total += self.frames[i];
            self.pos += 1;
            if total >= budget {
                break;
            }
        }
        batch
    }
}

/// Clip, take one Adam step and return the pre-clip gradient norm.
pub(crate) fn apply_update(
    params: &mut ParamStore,
    optimizer: &mut AdamState,
    mut grads: crate::numcore::Gradients,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let norm = clip_grad_norm(&mut grads, clip)?;
    optimizer.step(params, &grads, lr)?;
    Ok(norm)
}

/// An utterance view with some streams removed or replaced.
pub(crate) struct Prepared<'a> {
    pub a: Option<Tensor>,
    pub b: Option<&'a Tensor>,
}

impl Prepared<'_> {
    pub(crate) fn input(&self) -> Result<ModalityInput<'_>> {
        ModalityInput::new(self.a.as_ref(), self.b)
    }
}

/// Restrict to `present` streams and apply noise augmentation to A.
pub(crate) fn prepare<'a, R: Rng + ?Sized>(
    utt: &'a MultimodalUtterance,
    present: Profile,
    noise: &NoiseAugConfig,
    r: &mut R,
) -> Result<Prepared<'a>> {
    let a = match (&utt.features_a, present.has_a()) {
        (Some(a), true) if noise.p_apply > 0.0 => Some(add_noise(a, noise.snr_db, noise.p_apply, r)?.0),
        (Some(a), true) => Some(a.clone()),
        _ => None,
    };
    let b = if present.has_b() { utt.features_b.as_ref() } else { None };
    Ok(Prepared { a, b })
}

/// Weighted masked cross-entropy on `logits` for a packed batch.
fn masked_loss_node(
    g: &mut Graph,
    logits: NodeId,
    targets: &[usize],
    masked: &[bool],
    unmasked_weight: f64,
) -> Result<NodeId> {
    let weights: Vec<f64> = masked.iter().map(|&m| if m { 1.0 } else { unmasked_weight }).collect();
    g.cross_entropy(logits, targets, &weights)
}

/// Train `model` on masked cluster prediction.
///
/// `targets[i]` holds frame targets for utterance `i`; utterances with
/// `None` are not trained on. `on_checkpoint` is called every
/// `checkpoint_every` updates (if non-zero) and after the final update.
pub fn pretrain_with(
    mut model: Model,
    corpus: &Corpus,
    targets: &[Option<Vec<usize>>],
    config: &PretrainConfig,
    checkpoint_every: usize,
    on_checkpoint: &mut dyn FnMut(usize, &Model, &AdamState) -> Result<()>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if !model.has_cluster_head() {
        return Err(Error::InvalidArgument("pre-training needs a model with a cluster head".into()));
    }
    if targets.len() != corpus.len() {
        return Err(Error::InvalidArgument(format!("{} target lists for {} utterances", targets.len(), corpus.len())));
    }
    let k = model.config.n_clusters;
    let mut eligible = Vec::new();
    for (i, (u, t)) in corpus.utterances.iter().zip(targets).enumerate() {
        if let Some(t) = t {
            if t.len() != u.frames || t.iter().any(|&c| c >= k) {
                return Err(Error::InvalidArgument(format!("targets for `{}` do not match its frames or K", u.id)));
            }
            if u.frames > 0 {
                eligible.push(i);
            }
        }
    }
    let mut optimizer = AdamState::default();
    let mut log = Vec::new();
    let mut skipped_empty_mask = 0;
    if config.updates == 0 {
        on_checkpoint(0, &model, &optimizer)?;
        return Ok(PretrainOutcome { model, optimizer, log, skipped_empty_mask });
    }
    if eligible.is_empty() {
        return Err(Error::InvalidArgument("no utterance has targets".into()));
    }
    let frames: Vec<usize> = corpus.utterances.iter().map(|u| u.frames).collect();
    let mut sampler = BatchSampler::new(eligible, frames, config.seed, "pretrain/batch");
    let mut modality_rng = rng::stream(config.seed, "pretrain/modality");
    let mut mask_rng = rng::stream(config.seed, "pretrain/mask");
    let mut noise_rng = rng::stream(config.seed, "pretrain/noise");
    let trainable = vec![true; model.params.len()];
    let (mut sum_loss, mut sum_acc, mut n_acc, mut since) = (0.0, 0.0, 0usize, 0usize);

    for step in 0..config.updates {
        let lr = config.schedule.lr(step, config.updates, config.lr);
        let batch = sampler.next(config.frame_budget);
        let mut prepared = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for &i in &batch {
            let u = &corpus.utterances[i];
            let present = sample_modalities(&config.dropout, u.profile(), &mut modality_rng);
            prepared.push(prepare(u, present, &config.noise, &mut noise_rng)?);
            let m = sample_mask(u.frames, config.mask.p_mask, config.mask.span, &mut mask_rng);
            if m.is_empty() {
                skipped_empty_mask += 1;
            }
            masks.push(m);
        }
        let mut batch_targets = Vec::new();
        let mut masked = Vec::new();
        for (&i, m) in batch.iter().zip(&masks) {
            let t = targets[i].as_ref().expect("eligible utterances have targets");
            batch_targets.extend_from_slice(t);
            let mut flags = vec![false; t.len()];
            m.iter().for_each(|&j| flags[j] = true);
            masked.extend(flags);
        }
        let total_weight: f64 = masked.iter().map(|&m| if m { 1.0 } else { config.unmasked_weight }).sum();
        let grad_norm;
        if total_weight > 0.0 {
            let items = prepared
                .iter()
                .zip(&masks)
                .map(|(p, m)| Ok(BatchItem { input: p.input()?, mask: m }))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let mut b = Binder::new(&model.params, &trainable);
            let nodes = model.encode_batch(&mut g, &mut b, &items)?;
            let logits = model.cluster_logits_node(&mut g, &mut b, nodes.final_features)?;
            let loss = masked_loss_node(&mut g, logits, &batch_targets, &masked, config.unmasked_weight)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step, utterances: batch.iter().map(|&i| corpus.utterances[i].id.clone()).collect() });
            }
            let lv = g.value(logits);
            let (mut hits, mut count) = (0usize, 0usize);
            for (r, (&flag, &t)) in masked.iter().zip(&batch_targets).enumerate() {
                if flag {
                    count += 1;
                    hits += usize::from(argmax(lv.row(r)) == t);
                }
            }
            let grads = g.backward(loss)?;
            drop(b);
            grad_norm = apply_update(&mut model.params, &mut optimizer, grads, lr, config.clip)?;
            sum_loss += loss_value;
            if count > 0 {
                sum_acc += hits as f64 / count as f64;
                n_acc += 1;
            }
        } else {
            grad_norm = 0.0;
        }
        since += 1;
        let done = step + 1;
        if done % config.log_interval == 0 || done == config.updates {
            log.push(StepRecord {
                step: done,
                loss: sum_loss / since as f64,
                masked_acc: if n_acc > 0 { sum_acc / n_acc as f64 } else { 0.0 },
                lr,
                grad_norm,
            });
            (sum_loss, sum_acc, n_acc, since) = (0.0, 0.0, 0, 0);
        }
        if (checkpoint_every > 0 && done % checkpoint_every == 0) || done == config.updates {
            on_checkpoint(done, &model, &optimizer)?;
        }
    }
    Ok(PretrainOutcome { model, optimizer, log, skipped_empty_mask })
}

pub fn pretrain(model: Model, corpus: &Corpus, targets: &[Option<Vec<usize>>], config: &PretrainConfig) -> Result<PretrainOutcome> {
    pretrain_with(model, corpus, targets, config, 0, &mut |_, _, _| Ok(()))
}

/// Held-out masked-prediction accuracy with every available stream present
/// and freshly sampled masks.
pub fn masked_accuracy(
    model: &Model,
    corpus: &Corpus,
    targets: &[Option<Vec<usize>>],
    mask: &MaskConfig,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, "eval/mask");
    let (mut hits, mut count) = (0.0, 0usize);
    for (u, t) in corpus.utterances.iter().zip(targets) {
        let Some(t) = t else { continue };
        let m = sample_mask(u.frames, mask.p_mask, mask.span, &mut r);
        if m.is_empty() {
            continue;
        }
        let out = model.encode(ModalityInput::new(u.features_a.as_ref(), u.features_b.as_ref())?, Some(&m))?;
        let logits = model.cluster_logits(&out.final_features)?;
        if let Some((_, acc)) = masked_prediction_loss(&logits, t, &m)? {
            hits += acc * m.len() as f64;
            count += m.len();
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no masked frames to evaluate".into()));
    }
    Ok(hits / count as f64)
}

/// Result of alternating clustering and pre-training.
#[derive(Clone, Debug)]
pub struct CycleOutcome {
    pub model: Model,
    /// Codebook and targets used by each iteration, in order.
    pub iterations: Vec<Targets>,
    pub logs: Vec<Vec<StepRecord>>,
}

impl CycleOutcome {
    pub fn codebooks(&self) -> Vec<&Codebook> {
        self.iterations.iter().map(|t| &t.codebook).collect()
    }
}

/// Iteration 1 clusters raw anchor frames; each later iteration clusters
/// the previous model's features and trains a fresh model on them.
pub fn run_iteration_cycle(
    corpus: &Corpus,
    n_iterations: usize,
    model_config: &ModelConfig,
    pretrain_config: &PretrainConfig,
    target_config: &TargetConfig,
    seed: u64,
) -> Result<CycleOutcome> {
    if n_iterations == 0 {
        return Err(Error::InvalidArgument("need at least one iteration".into()));
    }
    if target_config.kmeans.k != model_config.n_clusters {
        return Err(Error::Config(format!(
            "codebook size {} differs from the cluster head size {}",
            target_config.kmeans.k, model_config.n_clusters
        )));
    }
    let mut iterations = Vec::new();
    let mut logs = Vec::new();
    let mut model: Option<Model> = None;
    for it in 1..=n_iterations {
        let targets = build_targets(model.as_ref(), corpus, it, target_config)?;
        let fresh = Model::new(model_config.clone(), rng::sub_seed(seed, &format!("cycle/model/{it}")))?;
        let cfg = PretrainConfig { seed: rng::sub_seed(seed, &format!("cycle/pretrain/{it}")), ..pretrain_config.clone() };
        let out = pretrain(fresh, corpus, &targets.labels, &cfg)?;
        iterations.push(targets);
        logs.push(out.log);
        model = Some(out.model);
    }
    Ok(CycleOutcome { model: model.expect("at least one iteration"), iterations, logs })
}
