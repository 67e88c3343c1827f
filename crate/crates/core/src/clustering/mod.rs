//! K-means codebooks, frame assignment and pseudo-label construction.

use std::fmt;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::error::{Error, Result};
use crate::model::{Model, ModalityInput};
use crate::numcore::tensor::gemm;
use crate::numcore::Tensor;
use crate::rng;

mod io;

pub use io::{read_codebook, write_codebook};

/// Which features a codebook was fit on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookSource {
    /// Raw anchor-modality (A) frames; first-iteration targets.
    RawAnchor,
    /// Encoder features with both streams present.
    Av,
    /// Encoder features from modality A alone.
    A,
    /// Encoder features from modality B alone.
    B,
    /// The AB, A and B feature sets pooled together.
    Union,
    /// Encoder features with whatever streams each utterance carries.
    Available,
}

impl CodebookSource {
    pub const ALL: [CodebookSource; 6] = [
        CodebookSource::RawAnchor,
        CodebookSource::Av,
        CodebookSource::A,
        CodebookSource::B,
        CodebookSource::Union,
        CodebookSource::Available,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CodebookSource::RawAnchor => "raw-anchor",
            CodebookSource::Av => "av",
            CodebookSource::A => "a",
            CodebookSource::B => "b",
            CodebookSource::Union => "union",
            CodebookSource::Available => "available",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

impl fmt::Display for CodebookSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K x D` centroid matrix.
    pub centroids: Tensor,
    pub source: CodebookSource,
    pub stats: FitStats,
}

impl Codebook {
    pub fn new(centroids: Tensor, source: CodebookSource) -> Result<Self> {
        let (k, _) = centroids.dims2()?;
        if k < 2 {
            return Err(Error::InvalidArgument(format!("codebook needs at least 2 centroids, got {k}")));
        }
        if !centroids.is_finite() {
            return Err(Error::InvalidArgument("codebook centroids must be finite".into()));
        }
        Ok(Codebook { centroids, source, stats: FitStats { inertia: f64::NAN, iterations: 0, history: Vec::new() } })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.last_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub restarts: usize,
    /// Fitting subsamples this many frames when given more.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { k: 40, max_iters: 100, restarts: 3, max_frames: 200_000, seed: 0 }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("kmeans k must be >= 2, got {}", self.k)));
        }
        if self.restarts == 0 || self.max_frames < self.k {
            return Err(Error::Config("kmeans needs restarts >= 1 and max_frames >= k".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every row, lowest id on ties. Distances are screened
/// with one matrix product and the close candidates rescored exactly.
fn nearest(x: &Tensor, centroids: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (n, d) = (x.rows(), x.last_dim());
    let k = centroids.rows();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let c_norm: Vec<f64> = (0..k).map(|j| centroids.row(j).iter().map(|v| v * v).sum()).collect();
    let mut dots = vec![0.0; n * k];
    gemm(n, d, k, 1.0, x.data(), d, 1, centroids.data(), 1, d, 0.0, &mut dots, k, 1);
    let mut ids = Vec::with_capacity(n);
    let mut dist = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let x_norm: f64 = row.iter().map(|v| v * v).sum();
        let approx: Vec<f64> = (0..k).map(|j| x_norm - 2.0 * dots[i * k + j] + c_norm[j]).collect();
        let best = approx.iter().copied().fold(f64::INFINITY, f64::min);
        let slack = 1e-9 * (x_norm + c_norm.iter().copied().fold(0.0, f64::max)).max(1.0);
        let mut pick = (usize::MAX, f64::INFINITY);
        for (j, &a) in approx.iter().enumerate() {
            if a <= best + slack {
                let exact = sq_dist(row, centroids.row(j));
                if exact < pick.1 {
                    pick = (j, exact);
                }
            }
        }
        ids.push(pick.0);
        dist.push(pick.1);
    }
    (ids, dist)
}

/// Nearest-centroid ids for each frame of `features` (`T x D`).
pub fn assign(codebook: &Codebook, features: &Tensor) -> Result<Vec<usize>> {
    check_dims(codebook, features)?;
    Ok(nearest(features, &codebook.centroids).0)
}

/// Sum of squared distances from each frame to its nearest centroid.
pub fn inertia(codebook: &Codebook, features: &Tensor) -> Result<f64> {
    check_dims(codebook, features)?;
    Ok(nearest(features, &codebook.centroids).1.iter().sum())
}

/// [`assign`] over many feature matrices in parallel.
pub fn assign_many(codebook: &Codebook, features: &[&Tensor]) -> Result<Vec<Vec<usize>>> {
    features.par_iter().map(|f| assign(codebook, f)).collect()
}

fn check_dims(codebook: &Codebook, features: &Tensor) -> Result<()> {
    if features.rank() != 2 || features.last_dim() != codebook.dim() {
        return Err(Error::shape(
            "assign",
            format!("features {:?} vs codebook dimension {}", features.shape(), codebook.dim()),
        ));
    }
    Ok(())
}

/// Fit a `k`-centroid codebook with the default restart count.
pub fn kmeans_fit(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    let config = KMeansConfig { k, max_iters, seed, ..Default::default() };
    kmeans_fit_with(features, &config, CodebookSource::RawAnchor)
}

/// k-means++ seeding followed by Lloyd iterations; the best of
/// `config.restarts` runs (lowest inertia, earliest on ties) is kept.
pub fn kmeans_fit_with(features: &Tensor, config: &KMeansConfig, source: CodebookSource) -> Result<Codebook> {
    config.validate()?;
    let (n, _) = features.dims2()?;
    if n < config.k {
        return Err(Error::InvalidArgument(format!("kmeans needs at least k = {} frames, got {n}", config.k)));
    }
    if !features.is_finite() {
        return Err(Error::InvalidArgument("kmeans features must be finite".into()));
    }
    let sampled;
    let x = if n > config.max_frames {
        let mut r = rng::stream(config.seed, "kmeans/subsample");
        let mut rows = index::sample(&mut r, n, config.max_frames).into_vec();
        rows.sort_unstable();
        let parts: Vec<&[f64]> = rows.iter().map(|&i| features.row(i)).collect();
        sampled = Tensor::matrix(rows.len(), features.last_dim(), parts.concat())?;
        &sampled
    } else {
        features
    };
    let runs: Vec<(Tensor, FitStats)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = rng::sub_seed(config.seed, &format!("kmeans/restart/{r}"));
            // Odd restarts start from uniformly drawn frames rather than k-means++.
            let init = if r % 2 == 0 { kmeans_pp(x, config.k, seed) } else { random_rows(x, config.k, seed) };
            lloyd(x, init, config.max_iters)
        })
        .collect();
    let (centroids, stats) = runs
        .into_iter()
        .reduce(|best, run| if run.1.inertia < best.1.inertia { run } else { best })
        .expect("at least one restart");
    Ok(Codebook { centroids, source, stats })
}

fn kmeans_pp(x: &Tensor, k: usize, seed: u64) -> Tensor {
    let n = x.rows();
    let mut r = rng::stream(seed, "kmeans++");
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            r.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let rows: Vec<&[f64]> = chosen.iter().map(|&i| x.row(i)).collect();
    Tensor::matrix(k, x.last_dim(), rows.concat()).expect("consistent rows")
}

fn random_rows(x: &Tensor, k: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "kmeans/forgy");
    let rows: Vec<&[f64]> = index::sample(&mut r, x.rows(), k).iter().map(|i| x.row(i)).collect();
    Tensor::matrix(k, x.last_dim(), rows.concat()).expect("consistent rows")
}

fn lloyd(x: &Tensor, mut centroids: Tensor, max_iters: usize) -> (Tensor, FitStats) {
    let (n, d) = (x.rows(), x.last_dim());
    let k = centroids.rows();
    let (mut ids, mut dist) = nearest(x, &centroids);
    let mut history = vec![dist.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in ids.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let cd = centroids.data_mut();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    cd[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        // Reseed each empty cluster at the frame farthest from its centroid.
        let mut taken = vec![false; n];
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..n).filter(|&i| !taken[i]).fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            });
            if let Some(i) = far {
                taken[i] = true;
                cd[c * d..(c + 1) * d].copy_from_slice(x.row(i));
            }
        }
        let (new_ids, new_dist) = nearest(x, &centroids);
        history.push(new_dist.iter().sum());
        let fixpoint = new_ids == ids;
        ids = new_ids;
        dist = new_dist;
        if fixpoint {
            break;
        }
    }
    if hartigan(x, &mut centroids, &mut ids, max_iters) {
        let (_, dist) = nearest(x, &centroids);
        history.push(dist.iter().sum());
    }
    let inertia = *history.last().expect("non-empty history");
    (centroids, FitStats { inertia, iterations, history })
}

/// Single-point transfers that lower the total SSE, applied until none is
/// left. Escapes Lloyd fixed points such as an outlier holding a cluster of
/// its own. Returns whether any point moved.
fn hartigan(x: &Tensor, centroids: &mut Tensor, ids: &mut [usize], max_passes: usize) -> bool {
    let (n, d) = (x.rows(), x.last_dim());
    let k = centroids.rows();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * d];
    for (i, &c) in ids.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    let mut moved_any = false;
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..n {
            let a = ids[i];
            if counts[a] < 2 {
                continue;
            }
            let row = x.row(i);
            let cost = |c: usize, grow: bool| -> f64 {
                let m = counts[c] as f64;
                if m == 0.0 {
                    return 0.0;
                }
                let dist: f64 = row.iter().zip(&sums[c * d..(c + 1) * d]).map(|(v, s)| (v - s / m).powi(2)).sum();
                if grow { dist * m / (m + 1.0) } else { dist * m / (m - 1.0) }
            };
            let removal = cost(a, false);
            let best = (0..k).filter(|&c| c != a).map(|c| (c, cost(c, true))).min_by(|p, q| p.1.total_cmp(&q.1));
            if let Some((b, _)) = best.filter(|&(_, g)| g < removal * (1.0 - 1e-12)) {
                counts[a] -= 1;
                counts[b] += 1;
                for j in 0..d {
                    sums[a * d + j] -= row[j];
                    sums[b * d + j] += row[j];
                }
                ids[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if moved_any {
        // Exact means from the final partition, free of running-sum drift.
        let mut fresh = vec![0.0; k * d];
        for (i, &c) in ids.iter().enumerate() {
            for (s, v) in fresh[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let cd = centroids.data_mut();
        for c in (0..k).filter(|&c| counts[c] > 0) {
            for j in 0..d {
                cd[c * d + j] = fresh[c * d + j] / counts[c] as f64;
            }
        }
    }
    moved_any
}

/// Settings for pseudo-label construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub kmeans: KMeansConfig,
    /// Encoder depth used for later iterations; `None` means the final layer.
    pub layer: Option<usize>,
    /// Frames per inference chunk when extracting encoder features.
    pub frames_per_chunk: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig { kmeans: KMeansConfig::default(), layer: None, frames_per_chunk: 2000 }
    }
}

/// Per-utterance cluster targets plus the codebook that produced them.
#[derive(Clone, Debug)]
pub struct Targets {
    pub codebook: Codebook,
    /// `None` for utterances excluded from this iteration.
    pub labels: Vec<Option<Vec<usize>>>,
    /// Ids of excluded utterances.
    pub skipped: Vec<String>,
}

impl Targets {
    pub fn covered(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Build frame targets for `corpus`.
///
/// Iteration 1 clusters raw modality-A frames and skips utterances without A;
/// later iterations cluster `model` features computed from every stream an
/// utterance carries, so every utterance gets targets.
pub fn build_targets(model: Option<&Model>, corpus: &Corpus, iteration: usize, config: &TargetConfig) -> Result<Targets> {
    let features: Vec<Option<Tensor>> = match (iteration, model) {
        (0, _) => return Err(Error::InvalidArgument("iterations are numbered from 1".into())),
        (1, None) => corpus.utterances.iter().map(|u| u.features_a.clone()).collect(),
        (1, Some(_)) => return Err(Error::InvalidArgument("iteration 1 clusters raw features, not a model".into())),
        (_, None) => return Err(Error::InvalidArgument(format!("iteration {iteration} needs a model"))),
        (_, Some(m)) => {
            let inputs = corpus
                .utterances
                .iter()
                .map(|u| ModalityInput::new(u.features_a.as_ref(), u.features_b.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let depth = config.layer.unwrap_or(m.config.layers);
            if depth > m.config.layers {
                return Err(Error::InvalidArgument(format!("layer {depth} beyond encoder depth {}", m.config.layers)));
            }
            m.encode_all(&inputs, config.frames_per_chunk)?
                .into_iter()
                .map(|o| Some(o.depth(depth).clone()))
                .collect()
        }
    };
    let source = if iteration == 1 { CodebookSource::RawAnchor } else { CodebookSource::Available };
    let present: Vec<&Tensor> = features.iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument(format!("corpus `{}` has no anchor-bearing utterances", corpus.name)));
    }
    let pooled = Tensor::vstack(&present)?;
    let codebook = kmeans_fit_with(&pooled, &config.kmeans, source)?;
    let assigned = assign_many(&codebook, &present)?;
    let mut assigned = assigned.into_iter();
    let mut labels = Vec::with_capacity(features.len());
    let mut skipped = Vec::new();
    for (u, f) in corpus.utterances.iter().zip(&features) {
        if f.is_some() {
            labels.push(assigned.next());
        } else {
            labels.push(None);
            skipped.push(u.id.clone());
        }
    }
    Ok(Targets { codebook, labels, skipped })
}
