use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use super::*;
use crate::datagen::{CorpusSpec, Generator, GeneratorConfig, ProfileMix};
use crate::model::ModelConfig;

#[test]
fn pnmi_extremes() {
    let labels = [0usize, 1, 2, 1, 0, 2, 2];
    let renamed: Vec<usize> = labels.iter().map(|&l| [7, 3, 9][l]).collect();
    assert!((pnmi(&labels, &renamed).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(pnmi(&labels, &[4; 7]).unwrap(), 0.0);
    assert!(pnmi(&[1, 1, 1], &[0, 1, 2]).is_err());
    assert!(pnmi(&[0, 1], &[0]).is_err());
    assert!(pnmi(&[], &[]).is_err());
}

#[test]
fn pnmi_two_by_two_table() {
    // Joint counts (rows: label, columns: cluster) [[2, 1], [0, 3]].
    let labels = [0usize, 0, 0, 1, 1, 1];
    let clusters = [0usize, 0, 1, 1, 1, 1];
    // H(Y) = ln 2 and I = (1/3) ln 2 - (1/6) ln 2 + (1/2) ln(3/2).
    let expected = (2f64.ln() / 6.0 + 0.5 * 1.5f64.ln()) / 2f64.ln();
    assert!((pnmi(&labels, &clusters).unwrap() - expected).abs() < 1e-12);
}

proptest! {
    #[test]
    fn pnmi_bounds_and_relabeling(
        pairs in prop::collection::vec((0usize..5, 0usize..6), 2..200),
        shift in 1usize..50,
    ) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let clusters: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l != labels[0]));
        let v = pnmi(&labels, &clusters).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let permuted: Vec<usize> = clusters.iter().map(|&c| (c * 7 + shift) % 101).collect();
        prop_assert!((pnmi(&labels, &permuted).unwrap() - v).abs() < 1e-12);
        let relabeled: Vec<usize> = labels.iter().map(|&l| 1000 - l).collect();
        prop_assert!((pnmi(&relabeled, &clusters).unwrap() - v).abs() < 1e-12);
        prop_assert!((pnmi(&labels, &labels).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gap_and_ratio_of_hand_matrices() {
    let uniform = PnmiMatrix { values: [[0.4; 3]; 4] };
    assert_eq!(uniform.cross_modal_gap(), 0.0);
    assert_eq!(uniform.min_column_ratio(), 1.0);
    let m = PnmiMatrix { values: [[0.4, 0.4, 0.2], [0.5, 0.4, 0.1], [0.4, 0.5, 0.1], [0.1, 0.1, 0.3]] };
    // Column av: |0.4-0.5| + |0.1-0.5|; column a: |0.4-0.5| + |0.1-0.5|; column b: |0.1-0.3| + |0.1-0.3|.
    assert!((m.cross_modal_gap() - (0.5 + 0.5 + 0.4) / 6.0).abs() < 1e-12);
    assert!((m.min_column_ratio() - 0.1 / 0.5).abs() < 1e-12);
    assert!(m.to_csv().starts_with("codebook,y_av,y_a,y_b\nunion,0.400000"));
}

fn blobs(seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, "blobs");
    let noise = Tensor::randn(&[300, 4], 0.05, &mut r);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..300 {
        let unit = i % 6;
        labels.push(unit);
        for j in 0..4 {
            data.push(10.0 * ((unit >> (j % 3)) & 1) as f64 + (unit * j) as f64 + noise.row(i)[j]);
        }
    }
    (Tensor::matrix(300, 4, data).unwrap(), labels)
}

#[test]
fn identical_views_give_identical_entries() {
    let (x, labels) = blobs(1);
    let kmeans = KMeansConfig { k: 6, max_iters: 100, restarts: 4, max_frames: 10_000, seed: 3 };
    let m = cross_quantize_features(&[x.clone(), x.clone(), x], &labels, &kmeans).unwrap();
    let first = m.values[0][0];
    for row in &m.values {
        for &v in row {
            assert!((v - first).abs() < 1e-9, "{m:?}");
        }
    }
}

fn small_setup() -> (Model, Corpus) {
    let cfg = ModelConfig { embed_dim: 16, heads: 2, ffn_dim: 32, frontend_dim: 16, layers: 2, n_clusters: 8, ..Default::default() };
    let model = Model::new(cfg, 5).unwrap();
    let generator = Generator::new(GeneratorConfig { seed: 1, ..Default::default() }).unwrap();
    let corpus = generator
        .corpus(&CorpusSpec { name: "m".into(), n_utts: 8, min_frames: 20, max_frames: 30, mix: ProfileMix { ab: 3.0, a: 1.0, b: 0.0 } })
        .unwrap();
    (model, corpus)
}

fn small_analysis() -> AnalysisConfig {
    AnalysisConfig { kmeans: KMeansConfig { k: 8, max_iters: 20, restarts: 1, max_frames: 5000, seed: 0 }, ..Default::default() }
}

#[test]
fn layerwise_covers_every_depth_and_is_deterministic() {
    let (model, corpus) = small_setup();
    let lw = layerwise_pnmi(&model, &corpus, &small_analysis()).unwrap();
    assert_eq!(lw.layers.len(), model.config.layers + 1);
    assert_eq!(lw.gaps().len(), 3);
    assert_eq!(lw.to_csv().lines().count(), 1 + 4 * 3);
    let final_only = cross_quantization(&model, &corpus, &small_analysis()).unwrap();
    assert_eq!(&final_only, lw.layers.last().unwrap());
    assert_eq!(cross_quantization(&model, &corpus, &small_analysis()).unwrap(), final_only);
    for row in &final_only.values {
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn views_only_use_ab_utterances() {
    let (model, corpus) = small_setup();
    let views = extract_views(&model, &corpus, 100).unwrap();
    assert_eq!(views.ids.len(), 6);
    let frames: usize = corpus.utterances.iter().filter(|u| u.profile() == Profile::AB).map(|u| u.frames).sum();
    assert_eq!(views.labels.len(), frames);
    assert_eq!(views.pooled(2, 0).unwrap().rows(), frames);
}

#[test]
fn pca_of_two_dimensional_data_is_a_rotation() {
    let x = Tensor::randn(&[40, 2], 1.0, &mut rng::stream(2, "p"));
    let x = Tensor::matrix(40, 2, x.data().iter().enumerate().map(|(i, v)| if i % 2 == 0 { 3.0 * v } else { *v }).collect()).unwrap();
    let p = pca(&x, 2).unwrap();
    assert!(!p.rank_deficient);
    let y = p.transform(&x).unwrap();
    for i in 0..40 {
        for j in 0..40 {
            let dx: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dy: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((dx - dy).abs() < 1e-9);
        }
    }
}

#[test]
fn pca_matches_dense_eigensolver() {
    let n = 200;
    let base = Tensor::randn(&[n, 10], 1.0, &mut rng::stream(4, "p"));
    // Give the columns distinct scales so the spectrum is well separated.
    let x = Tensor::matrix(n, 10, base.data().iter().enumerate().map(|(i, v)| v * (1.0 + (i % 10) as f64)).collect()).unwrap();
    let p = pca(&x, 3).unwrap();

    let mean: Vec<f64> = (0..10).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, 10, |i, j| x.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    for (got, want) in p.explained_variance.iter().zip(&vals) {
        assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn pca_flags_rank_deficiency() {
    let x = Tensor::matrix(5, 3, (0..5).flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect()).unwrap();
    let p = pca(&x, 2).unwrap();
    assert!(p.rank_deficient);
    assert_eq!(p.components.rows(), 1);
}

#[test]
fn pca_ignores_row_order_up_to_sign() {
    let x = Tensor::randn(&[30, 4], 1.0, &mut rng::stream(6, "p"));
    let x = Tensor::matrix(30, 4, x.data().iter().enumerate().map(|(i, v)| v * (1.0 + (i % 4) as f64)).collect()).unwrap();
    let rows: Vec<&[f64]> = (0..30).rev().map(|i| x.row(i)).collect();
    let reversed = Tensor::matrix(30, 4, rows.concat()).unwrap();
    let (a, b) = (pca(&x, 2).unwrap(), pca(&reversed, 2).unwrap());
    for c in 0..2 {
        let d: f64 = a.components.row(c).iter().zip(b.components.row(c)).map(|(u, v)| u * v).sum();
        assert!((d.abs() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn projection_export_is_reproducible_from_basis() {
    let (model, corpus) = small_setup();
    let export = project_features(&model, &corpus, 50, 3).unwrap();
    assert_eq!(export.points.len(), 150);
    let coords = export.pca.transform(&export.features).unwrap();
    for (p, i) in export.points.iter().zip(0..) {
        assert_eq!((p.x, p.y), (coords.row(i)[0], coords.row(i)[1]));
    }
    assert_eq!(export, project_features(&model, &corpus, 50, 3).unwrap());
    assert!(export.to_csv().starts_with("x,y,modality,utterance,frame\n"));
    assert!(export.modality_separation() >= 0.0);
    assert!(project_features(&model, &corpus, 100_000, 3).is_err());
}
