//! Synthetic frame-aligned two-modality corpora.
//!
//! A latent unit sequence follows a Markov chain with geometric dwell times.
//! Modality A emits a noisy linear image of each unit's embedding; modality B
//! only sees the unit's viseme class (`unit % n_visemes`), so it carries less
//! information whenever `n_visemes < n_units`.

mod io;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{read_corpus, read_umod, write_corpus, write_umod, UmodData};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;

/// One printable character per unit.
pub const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Which modalities an utterance carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Profile {
    AB,
    A,
    B,
}

impl Profile {
    pub fn has_a(self) -> bool {
        matches!(self, Profile::AB | Profile::A)
    }

    pub fn has_b(self) -> bool {
        matches!(self, Profile::AB | Profile::B)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::AB => "AB",
            Profile::A => "A",
            Profile::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Profile> {
        match s.to_ascii_uppercase().as_str() {
            "AB" => Some(Profile::AB),
            "A" => Some(Profile::A),
            "B" => Some(Profile::B),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_units: usize,
    pub n_visemes: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    /// Dimension of the unit embeddings behind both emission maps.
    pub latent_dim: usize,
    /// Explicit transition matrix; drawn from the seed when absent.
    pub transition: Option<Vec<Vec<f64>>>,
    /// Gamma shape of the random transition weights (smaller is sparser).
    pub transition_concentration: f64,
    pub mean_dwell: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_units: 20,
            n_visemes: 10,
            dim_a: 16,
            dim_b: 24,
            latent_dim: 8,
            transition: None,
            transition_concentration: 0.3,
            mean_dwell: 4.0,
            sigma_a: 0.6,
            sigma_b: 0.6,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_units < 2 || self.n_units > ALPHABET.len() {
            return bad(format!("n_units must be in 2..={}, got {}", ALPHABET.len(), self.n_units));
        }
        if self.n_visemes == 0 || self.n_visemes > self.n_units {
            return bad(format!("n_visemes must be in 1..={}, got {}", self.n_units, self.n_visemes));
        }
        if self.dim_a == 0 || self.dim_b == 0 || self.latent_dim == 0 {
            return bad("feature and latent dimensions must be positive".into());
        }
        if !(self.sigma_a >= 0.0 && self.sigma_b >= 0.0) {
            return bad("emission noise scales must be non-negative".into());
        }
        if !(self.mean_dwell >= 1.0) {
            return bad(format!("mean_dwell must be >= 1, got {}", self.mean_dwell));
        }
        if !(self.transition_concentration > 0.0) {
            return bad("transition_concentration must be positive".into());
        }
        if let Some(t) = &self.transition {
            validate_transition(t, self.n_units)?;
        }
        Ok(())
    }
}

fn validate_transition(t: &[Vec<f64>], n: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::Config(format!("transition matrix has {} rows, expected {n}", t.len())));
    }
    for (i, row) in t.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Config(format!("transition row {i} has {} entries, expected {n}", row.len())));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("transition row {i} has negative or non-finite entries")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("transition row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Fractions of AB, A-only and B-only utterances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileMix {
    pub ab: f64,
    pub a: f64,
    pub b: f64,
}

impl ProfileMix {
    pub const AB_ONLY: ProfileMix = ProfileMix { ab: 1.0, a: 0.0, b: 0.0 };
    pub const A_ONLY: ProfileMix = ProfileMix { ab: 0.0, a: 1.0, b: 0.0 };
    pub const B_ONLY: ProfileMix = ProfileMix { ab: 0.0, a: 0.0, b: 1.0 };

    /// Profiles for `n` utterances: exact rounded counts, AB first.
    pub fn assign(&self, n: usize) -> Result<Vec<Profile>> {
        let total = self.ab + self.a + self.b;
        if [self.ab, self.a, self.b].iter().any(|f| !f.is_finite() || *f < 0.0) || total <= 0.0 {
            return Err(Error::Config(format!("invalid profile mix {self:?}")));
        }
        let n_ab = ((self.ab / total) * n as f64).round() as usize;
        let n_a = (((self.ab + self.a) / total) * n as f64).round() as usize - n_ab.min(n);
        let n_ab = n_ab.min(n);
        let n_a = n_a.min(n - n_ab);
        let mut out = vec![Profile::AB; n_ab];
        out.extend(std::iter::repeat_n(Profile::A, n_a));
        out.resize(n, Profile::B);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub name: String,
    pub n_utts: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub mix: ProfileMix,
}

impl CorpusSpec {
    pub fn new(name: impl Into<String>, n_utts: usize, mix: ProfileMix) -> Self {
        CorpusSpec { name: name.into(), n_utts, min_frames: 40, max_frames: 120, mix }
    }
}

/// The fixed generative world: transition statistics, emission maps, unit
/// embeddings. Everything is drawn once from the configuration seed.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    transition: Vec<Vec<f64>>,
    viseme_of: Vec<usize>,
    /// Noiseless emission per unit (`n_units x dim_a`).
    means_a: Tensor,
    /// Noiseless emission per viseme (`n_visemes x dim_b`).
    means_b: Tensor,
    perturbation: f64,
}

fn random_transition(n: usize, concentration: f64, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| if i == j { 0.0 } else { gamma.sample(r) + 1e-12 }).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect()
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let transition = match &config.transition {
            Some(t) => t.clone(),
            None => random_transition(
                config.n_units,
                config.transition_concentration,
                &mut rng::stream(seed, "generator/transition"),
            ),
        };
        let mut r = rng::stream(seed, "generator/emissions");
        let z = Tensor::randn(&[config.n_units, config.latent_dim], 1.0, &mut r);
        let w_std = 1.0 / (config.latent_dim as f64).sqrt();
        let w_a = Tensor::randn(&[config.latent_dim, config.dim_a], w_std, &mut r);
        let w_b = Tensor::randn(&[config.latent_dim, config.dim_b], w_std, &mut r);
        let means_a = z.matmul(&w_a)?;
        let means_b = z.slice_rows(0, config.n_visemes).matmul(&w_b)?;
        let viseme_of = (0..config.n_units).map(|u| u % config.n_visemes).collect();
        Ok(Generator { config, transition, viseme_of, means_a, means_b, perturbation: 0.0 })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn viseme_of(&self, unit: usize) -> usize {
        self.viseme_of[unit]
    }

    pub fn means_a(&self) -> &Tensor {
        &self.means_a
    }

    pub fn means_b(&self) -> &Tensor {
        &self.means_b
    }

    pub fn perturbation(&self) -> f64 {
        self.perturbation
    }

    /// Same unit inventory and emission maps, shifted transition statistics
    /// and larger emission noise. `scale = 0` returns an identical world.
    pub fn perturbed(&self, scale: f64) -> Result<Generator> {
        if !(0.0..=1.0).contains(&scale) {
            return Err(Error::Config(format!("perturbation scale must be in [0, 1], got {scale}")));
        }
        let mut out = self.clone();
        if scale == 0.0 {
            return Ok(out);
        }
        let n = self.config.n_units;
        let other = random_transition(
            n,
            self.config.transition_concentration,
            &mut rng::stream(self.config.seed, "generator/ood-transition"),
        );
        out.transition = self
            .transition
            .iter()
            .zip(&other)
            .map(|(a, b)| {
                let mut row: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - scale) * x + scale * y).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
                row
            })
            .collect();
        out.config.sigma_a *= 1.0 + scale;
        out.config.sigma_b *= 1.0 + scale;
        out.perturbation = scale;
        Ok(out)
    }

    /// Generate one utterance. Depends only on the world, `corpus`, `id`,
    /// `frames` and `profile`.
    pub fn utterance(&self, corpus: &str, id: &str, frames: usize, profile: Profile) -> MultimodalUtterance {
        let seed = self.config.seed;
        let key = format!("utt/{corpus}/{id}");
        let mut r = rng::stream(seed, &format!("{key}/units"));
        let n = self.config.n_units;
        let stay = 1.0 - 1.0 / self.config.mean_dwell;
        let mut units = Vec::with_capacity(frames);
        if frames > 0 {
            let mut u = r.random_range(0..n);
            loop {
                units.push(u);
                if units.len() == frames {
                    break;
                }
                if !r.random_bool(stay) {
                    u = sample_categorical(&self.transition[u], &mut r);
                }
            }
        }
        let emit = |means: &Tensor, sigma: f64, index: &dyn Fn(usize) -> usize, purpose: &str| {
            let mut r = rng::stream(seed, &format!("{key}/{purpose}"));
            let d = means.last_dim();
            let mut data = Vec::with_capacity(frames * d);
            for &u in &units {
                for &m in means.row(index(u)) {
                    let e: f64 = StandardNormal.sample(&mut r);
                    data.push(m + sigma * e);
                }
            }
            Tensor::new(vec![frames, d], data).expect("extents")
        };
        let features_a = profile.has_a().then(|| emit(&self.means_a, self.config.sigma_a, &|u| u, "a"));
        let features_b =
            profile.has_b().then(|| emit(&self.means_b, self.config.sigma_b, &|u| self.viseme_of[u], "b"));
        let transcript = collapse(&units);
        MultimodalUtterance { id: id.to_string(), frames, features_a, features_b, unit_labels: units, transcript }
    }

    /// Generate a corpus; utterances are produced in parallel, each from its
    /// own seed, so the result does not depend on scheduling.
    pub fn corpus(&self, spec: &CorpusSpec) -> Result<Corpus> {
        if spec.min_frames > spec.max_frames {
            return Err(Error::Config(format!(
                "min_frames {} exceeds max_frames {}",
                spec.min_frames, spec.max_frames
            )));
        }
        let profiles = spec.mix.assign(spec.n_utts)?;
        let utterances = profiles
            .par_iter()
            .enumerate()
            .map(|(i, &profile)| {
                let id = format!("{}-{i:05}", spec.name);
                let mut r = rng::stream(self.config.seed, &format!("utt/{}/{id}/length", spec.name));
                let frames = r.random_range(spec.min_frames..=spec.max_frames);
                self.utterance(&spec.name, &id, frames, profile)
            })
            .collect();
        Ok(Corpus {
            name: spec.name.clone(),
            fingerprint: corpus_fingerprint(&self.config, spec, self.perturbation),
            source: Some(CorpusSource { generator: self.config.clone(), spec: spec.clone(), perturbation: self.perturbation }),
            utterances,
        })
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], r: &mut R) -> usize {
    let x: f64 = r.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Run-length collapse: drops consecutive repeats.
pub fn collapse(seq: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &s in seq {
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

pub fn transcript_text(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| ALPHABET[t] as char).collect()
}

pub fn parse_transcript(text: &str) -> Result<Vec<usize>> {
    text.bytes()
        .map(|c| {
            ALPHABET
                .iter()
                .position(|&a| a == c)
                .ok_or_else(|| Error::InvalidArgument(format!("character {:?} outside the alphabet", c as char)))
        })
        .collect()
}

fn corpus_fingerprint(config: &GeneratorConfig, spec: &CorpusSpec, perturbation: f64) -> String {
    let doc = serde_json::json!({ "generator": config, "spec": spec, "perturbation": perturbation });
    rng::fingerprint(doc.to_string().as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalUtterance {
    pub id: String,
    pub frames: usize,
    pub features_a: Option<Tensor>,
    pub features_b: Option<Tensor>,
    /// Ground-truth unit per frame; for evaluation only.
    pub unit_labels: Vec<usize>,
    /// Collapsed unit sequence, as alphabet indices.
    pub transcript: Vec<usize>,
}

impl MultimodalUtterance {
    pub fn profile(&self) -> Profile {
        match (self.features_a.is_some(), self.features_b.is_some()) {
            (true, true) => Profile::AB,
            (true, false) => Profile::A,
            _ => Profile::B,
        }
    }

    /// Copy with only the modalities of `profile` kept (those present).
    pub fn restricted(&self, profile: Profile) -> MultimodalUtterance {
        let mut u = self.clone();
        if !profile.has_a() {
            u.features_a = None;
        }
        if !profile.has_b() {
            u.features_b = None;
        }
        u
    }
}

/// Everything needed to regenerate a corpus bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub generator: GeneratorConfig,
    pub spec: CorpusSpec,
    pub perturbation: f64,
}

impl CorpusSource {
    pub fn regenerate(&self) -> Result<Corpus> {
        Generator::new(self.generator.clone())?.perturbed(self.perturbation)?.corpus(&self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub fingerprint: String,
    pub source: Option<CorpusSource>,
    pub utterances: Vec<MultimodalUtterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.frames).sum()
    }

    /// Concatenation of two corpora (e.g. multimodal plus extra unimodal data).
    pub fn merged(&self, other: &Corpus) -> Corpus {
        let mut utterances = self.utterances.clone();
        utterances.extend(other.utterances.iter().cloned());
        Corpus {
            name: format!("{}+{}", self.name, other.name),
            fingerprint: rng::fingerprint(format!("{}+{}", self.fingerprint, other.fingerprint).as_bytes()),
            source: None,
            utterances,
        }
    }
}

/// Generate a corpus from a configuration.
pub fn generate_corpus(config: &GeneratorConfig, spec: &CorpusSpec) -> Result<Corpus> {
    Generator::new(config.clone())?.corpus(spec)
}

/// Out-of-domain corpus: shared unit inventory and emission maps, perturbed
/// transitions and noise.
pub fn make_ood_corpus(config: &GeneratorConfig, spec: &CorpusSpec, perturbation: f64) -> Result<Corpus> {
    Generator::new(config.clone())?.perturbed(perturbation)?.corpus(spec)
}

/// Result of a noise-mixing request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseOutcome {
    Applied,
    NotSelected,
    /// The signal has zero power, so no finite SNR can be met.
    SkippedZeroPower,
}

/// Lag-one correlation of the synthetic noise process.
pub const NOISE_AR_COEF: f64 = 0.9;

/// With probability `p_apply`, add AR(1) Gaussian noise scaled so that the
/// signal-to-noise ratio of the result is exactly `snr_db`.
pub fn add_noise<R: Rng + ?Sized>(
    features: &Tensor,
    snr_db: f64,
    p_apply: f64,
    r: &mut R,
) -> Result<(Tensor, NoiseOutcome)> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db must be finite, got {snr_db}")));
    }
    if !(0.0..=1.0).contains(&p_apply) {
        return Err(Error::InvalidArgument(format!("p_apply must be in [0, 1], got {p_apply}")));
    }
    if !r.random_bool(p_apply) {
        return Ok((features.clone(), NoiseOutcome::NotSelected));
    }
    let signal_power = mean_power(features.data());
    if !(signal_power > 0.0) {
        return Ok((features.clone(), NoiseOutcome::SkippedZeroPower));
    }
    let d = features.last_dim().max(1);
    let rows = features.len() / d;
    let innov = (1.0 - NOISE_AR_COEF * NOISE_AR_COEF).sqrt();
    let mut noise = vec![0.0; features.len()];
    for t in 0..rows {
        for j in 0..d {
            let e: f64 = StandardNormal.sample(r);
            noise[t * d + j] = if t == 0 { e } else { NOISE_AR_COEF * noise[(t - 1) * d + j] + innov * e };
        }
    }
    let noise_power = mean_power(&noise);
    let gain = (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    let data = features.data().iter().zip(&noise).map(|(x, n)| x + gain * n).collect();
    Ok((Tensor::new(features.shape().to_vec(), data)?, NoiseOutcome::Applied))
}

pub(crate) fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
