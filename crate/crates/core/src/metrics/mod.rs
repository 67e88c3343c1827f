//! Cluster quality (PNMI), cross-quantization, layerwise sweeps and 2-D
//! projections of encoder features.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::clustering::{assign, kmeans_fit_with, CodebookSource, KMeansConfig};
use crate::datagen::{Corpus, Profile};
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, ModalityInput, Model};
use crate::numcore::Tensor;
use crate::rng;

mod pca;
#[cfg(test)]
mod tests;

pub use pca::{pca, Pca};

/// Mutual information between `labels` and `clusters`, normalized by the
/// label entropy. Plug-in estimates, natural log.
pub fn pnmi(labels: &[usize], clusters: &[usize]) -> Result<f64> {
    if labels.len() != clusters.len() {
        return Err(Error::InvalidArgument(format!("{} labels vs {} cluster ids", labels.len(), clusters.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("pnmi needs at least one frame".into()));
    }
    let n = labels.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut py: HashMap<usize, f64> = HashMap::new();
    let mut pc: HashMap<usize, f64> = HashMap::new();
    for (&y, &c) in labels.iter().zip(clusters) {
        *joint.entry((y, c)).or_default() += 1.0;
        *py.entry(y).or_default() += 1.0;
        *pc.entry(c).or_default() += 1.0;
    }
    let mut ys: Vec<f64> = py.values().copied().collect();
    ys.sort_by(f64::total_cmp);
    let h_y: f64 = ys.iter().map(|&c| -(c / n) * (c / n).ln()).sum();
    if !(h_y > 0.0) {
        return Err(Error::InvalidArgument("labels have zero entropy; pnmi is undefined".into()));
    }
    let mut cells: Vec<((usize, usize), f64)> = joint.into_iter().collect();
    cells.sort_by_key(|c| c.0);
    let mi: f64 = cells.iter().map(|&((y, c), k)| (k / n) * ((k * n) / (py[&y] * pc[&c])).ln()).sum();
    Ok((mi / h_y).clamp(0.0, 1.0))
}

/// Input views compared in the cross-quantization analysis, in column order.
pub const VIEWS: [Profile; 3] = [Profile::AB, Profile::A, Profile::B];
/// Codebook sources, in row order.
pub const SOURCES: [CodebookSource; 4] = [CodebookSource::Union, CodebookSource::Av, CodebookSource::A, CodebookSource::B];

/// PNMI of every codebook source (rows) on every feature view (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnmiMatrix {
    pub values: [[f64; 3]; 4],
}

impl PnmiMatrix {
    pub fn get(&self, source: CodebookSource, view: Profile) -> f64 {
        let r = SOURCES.iter().position(|&s| s == source).expect("known codebook source");
        let c = VIEWS.iter().position(|&v| v == view).expect("known view");
        self.values[r][c]
    }

    /// Smallest row-minimum to row-maximum ratio over the columns.
    pub fn min_column_ratio(&self) -> f64 {
        (0..3)
            .map(|c| {
                let col: Vec<f64> = self.values.iter().map(|r| r[c]).collect();
                let max = col.iter().copied().fold(f64::MIN, f64::max);
                let min = col.iter().copied().fold(f64::MAX, f64::min);
                if max > 0.0 {
                    min / max
                } else {
                    1.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean absolute difference between each matched entry (codebook fit on
    /// the same view) and the cross entries of the same column.
    pub fn cross_modal_gap(&self) -> f64 {
        let per_view = [CodebookSource::Av, CodebookSource::A, CodebookSource::B];
        let mut total = 0.0;
        let mut count = 0;
        for (c, &view) in VIEWS.iter().enumerate() {
            let matched = self.get(per_view[c], view);
            for (r, &src) in per_view.iter().enumerate() {
                if r != c {
                    total += (self.get(src, view) - matched).abs();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("codebook,y_av,y_a,y_b\n");
        for (s, row) in SOURCES.iter().zip(&self.values) {
            writeln!(out, "{},{:.6},{:.6},{:.6}", s.tag(), row[0], row[1], row[2]).expect("write to string");
        }
        out
    }
}

/// Settings shared by the feature analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub kmeans: KMeansConfig,
    /// Encoder depth for cross-quantization; `None` means the final layer.
    pub layer: Option<usize>,
    pub frames_per_chunk: usize,
    /// Frames sampled per view for projections.
    pub projection_frames: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            kmeans: KMeansConfig { k: 40, max_iters: 50, restarts: 2, max_frames: 20_000, seed: 0 },
            layer: None,
            frames_per_chunk: 2000,
            projection_frames: 500,
        }
    }
}

/// Encoder outputs of every AB utterance under each view, plus the
/// concatenated unit labels.
pub struct ViewFeatures {
    pub ids: Vec<String>,
    /// `outputs[v][u]` for view `VIEWS[v]` and utterance `u`.
    pub outputs: [Vec<EncoderOutput>; 3],
    pub labels: Vec<usize>,
}

impl ViewFeatures {
    pub fn depth(&self) -> usize {
        self.outputs[0].first().map_or(0, |o| o.layers.len() - 1)
    }

    /// Pooled `frames x D` features of view `v` at encoder depth `l`.
    pub fn pooled(&self, v: usize, l: usize) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.outputs[v].iter().map(|o| o.depth(l)).collect();
        Tensor::vstack(&parts)
    }
}

/// Run the encoder on every AB utterance with both streams, only A and only B.
pub fn extract_views(model: &Model, corpus: &Corpus, frames_per_chunk: usize) -> Result<ViewFeatures> {
    let ab: Vec<_> = corpus.utterances.iter().filter(|u| u.profile() == Profile::AB && u.frames > 0).collect();
    if ab.is_empty() {
        return Err(Error::InvalidArgument(format!("corpus `{}` has no AB utterances", corpus.name)));
    }
    let run = |view: Profile| -> Result<Vec<EncoderOutput>> {
        let inputs = ab
            .iter()
            .map(|u| {
                ModalityInput::new(
                    u.features_a.as_ref().filter(|_| view.has_a()),
                    u.features_b.as_ref().filter(|_| view.has_b()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        model.encode_all(&inputs, frames_per_chunk)
    };
    Ok(ViewFeatures {
        ids: ab.iter().map(|u| u.id.clone()).collect(),
        outputs: [run(Profile::AB)?, run(Profile::A)?, run(Profile::B)?],
        labels: ab.iter().flat_map(|u| u.unit_labels.iter().copied()).collect(),
    })
}

/// Fit the four codebooks on the given per-view features and score every
/// (codebook, view) pair against `labels`.
pub fn cross_quantize_features(features: &[Tensor; 3], labels: &[usize], kmeans: &KMeansConfig) -> Result<PnmiMatrix> {
    let union = Tensor::vstack(&[&features[0], &features[1], &features[2]])?;
    let mut values = [[0.0; 3]; 4];
    for (r, &source) in SOURCES.iter().enumerate() {
        let fit_on = match source {
            CodebookSource::Union => &union,
            CodebookSource::Av => &features[0],
            CodebookSource::A => &features[1],
            _ => &features[2],
        };
        let codebook = kmeans_fit_with(fit_on, kmeans, source)?;
        for (c, f) in features.iter().enumerate() {
            values[r][c] = pnmi(labels, &assign(&codebook, f)?)?;
        }
    }
    Ok(PnmiMatrix { values })
}

/// Cross-quantization PNMI grid on the AB utterances of `corpus`.
pub fn cross_quantization(model: &Model, corpus: &Corpus, config: &AnalysisConfig) -> Result<PnmiMatrix> {
    let views = extract_views(model, corpus, config.frames_per_chunk)?;
    cross_quantization_from_views(&views, config)
}

pub fn cross_quantization_from_views(views: &ViewFeatures, config: &AnalysisConfig) -> Result<PnmiMatrix> {
    let depth = config.layer.unwrap_or(views.depth());
    if depth > views.depth() {
        return Err(Error::InvalidArgument(format!("layer {depth} beyond encoder depth {}", views.depth())));
    }
    let features = [views.pooled(0, depth)?, views.pooled(1, depth)?, views.pooled(2, depth)?];
    cross_quantize_features(&features, &views.labels, &config.kmeans)
}

/// PNMI grids for every encoder depth `0..=L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwisePnmi {
    pub layers: Vec<PnmiMatrix>,
}

impl LayerwisePnmi {
    pub fn gaps(&self) -> Vec<f64> {
        self.layers.iter().map(PnmiMatrix::cross_modal_gap).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,codebook,y_av,y_a,y_b\n");
        for (l, m) in self.layers.iter().enumerate() {
            for (s, row) in SOURCES.iter().zip(&m.values) {
                writeln!(out, "{l},{},{:.6},{:.6},{:.6}", s.tag(), row[0], row[1], row[2]).expect("write to string");
            }
        }
        out
    }
}

pub fn layerwise_pnmi(model: &Model, corpus: &Corpus, config: &AnalysisConfig) -> Result<LayerwisePnmi> {
    layerwise_pnmi_from_views(&extract_views(model, corpus, config.frames_per_chunk)?, config)
}

pub fn layerwise_pnmi_from_views(views: &ViewFeatures, config: &AnalysisConfig) -> Result<LayerwisePnmi> {
    let layers = (0..=views.depth())
        .map(|l| cross_quantization_from_views(views, &AnalysisConfig { layer: Some(l), ..config.clone() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerwisePnmi { layers })
}

/// One projected frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub view: Profile,
    pub utterance: String,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionExport {
    pub points: Vec<ProjectedPoint>,
    /// Pooled raw features, row-aligned with `points`.
    pub features: Tensor,
    pub pca: Pca,
}

impl ProjectionExport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,modality,utterance,frame\n");
        for p in &self.points {
            writeln!(out, "{:.9},{:.9},{},{},{}", p.x, p.y, p.view.as_str(), p.utterance, p.frame).expect("write to string");
        }
        out
    }

    /// Mean distance between per-view centroids divided by the mean distance
    /// of points to their own view centroid, in projected coordinates.
    pub fn modality_separation(&self) -> f64 {
        let mut centroids = Vec::new();
        let mut spread = 0.0;
        let mut n = 0usize;
        for view in VIEWS {
            let pts: Vec<&ProjectedPoint> = self.points.iter().filter(|p| p.view == view).collect();
            if pts.is_empty() {
                continue;
            }
            let m = pts.len() as f64;
            let (cx, cy) = (pts.iter().map(|p| p.x).sum::<f64>() / m, pts.iter().map(|p| p.y).sum::<f64>() / m);
            spread += pts.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>();
            n += pts.len();
            centroids.push((cx, cy));
        }
        let mut between = 0.0;
        let mut pairs = 0;
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                between += ((centroids[i].0 - centroids[j].0).powi(2) + (centroids[i].1 - centroids[j].1).powi(2)).sqrt();
                pairs += 1;
            }
        }
        if pairs == 0 || spread == 0.0 {
            return 0.0;
        }
        (between / pairs as f64) / (spread / n as f64)
    }
}

/// Sample `n_frames` frames of AB utterances, encode them under each view,
/// and project the pooled final-layer features onto their top two principal
/// directions.
pub fn project_features(model: &Model, corpus: &Corpus, n_frames: usize, seed: u64) -> Result<ProjectionExport> {
    let views = extract_views(model, corpus, 2000)?;
    project_views(&views, n_frames, seed)
}

pub fn project_views(views: &ViewFeatures, n_frames: usize, seed: u64) -> Result<ProjectionExport> {
    let mut index_of = Vec::new();
    for (u, out) in views.outputs[0].iter().enumerate() {
        index_of.extend((0..out.final_features.rows()).map(|t| (u, t)));
    }
    if index_of.len() < n_frames || n_frames == 0 {
        return Err(Error::InvalidArgument(format!("need {n_frames} frames, corpus has {}", index_of.len())));
    }
    let mut r = rng::stream(seed, "project/sample");
    let mut picks = index::sample(&mut r, index_of.len(), n_frames).into_vec();
    picks.sort_unstable();
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (v, &view) in VIEWS.iter().enumerate() {
        for &p in &picks {
            let (u, t) = index_of[p];
            rows.push(views.outputs[v][u].final_features.row(t));
            points.push(ProjectedPoint { x: 0.0, y: 0.0, view, utterance: views.ids[u].clone(), frame: t });
        }
    }
    let dim = rows[0].len();
    let features = Tensor::matrix(rows.len(), dim, rows.concat())?;
    let pca = pca(&features, 2)?;
    let coords = pca.transform(&features)?;
    for (i, p) in points.iter_mut().enumerate() {
        let row = coords.row(i);
        p.x = row.first().copied().unwrap_or(0.0);
        p.y = row.get(1).copied().unwrap_or(0.0);
    }
    Ok(ProjectionExport { points, features, pca })
}
