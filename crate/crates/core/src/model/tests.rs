use super::*;
use crate::numcore::grad_check;

fn small_config() -> ModelConfig {
    ModelConfig {
        dim_a: 5,
        dim_b: 7,
        frontend_dim: 8,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        ffn_dim: 24,
        n_clusters: 6,
        decoder_layers: 1,
        n_units: 4,
        positional_encoding: true,
    }
}

fn feats(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng::stream(seed, "feats"))
}

#[test]
fn config_validation() {
    assert!(ModelConfig { heads: 3, ..small_config() }.validate().is_err());
    assert!(ModelConfig { n_clusters: 1, ..small_config() }.validate().is_err());
    assert!(ModelConfig { layers: 0, ..small_config() }.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn fuse_absent_stream_equals_explicit_zeros() {
    let m = Model::new(small_config(), 1).unwrap();
    let run = |explicit: bool| {
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params, &[]);
        let h = g.constant(feats(6, 8, 2));
        let z = explicit.then(|| g.constant(Tensor::zeros(&[6, 8])));
        let y = m.fuse(&mut g, &mut b, Some(h), z).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn fuse_with_hand_set_weights_selects_stream_a() {
    let cfg = ModelConfig { embed_dim: 8, heads: 2, ..small_config() };
    let mut m = Model::new(cfg, 1).unwrap();
    let mut w = vec![0.0; 16 * 8];
    for i in 0..8 {
        w[i * 8 + i] = 1.0;
    }
    let wid = m.params.id("fusion.weight").unwrap();
    *m.params.tensor_mut(wid) = Tensor::matrix(16, 8, w).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params, &[]);
    let ha = feats(5, 8, 3);
    let hb = feats(5, 8, 4);
    let (na, nb) = (g.constant(ha.clone()), g.constant(hb));
    let y = m.fuse(&mut g, &mut b, Some(na), Some(nb)).unwrap();
    assert_eq!(g.value(y), &ha);
}

#[test]
fn fuse_of_empty_sequence_is_empty() {
    let m = Model::new(small_config(), 1).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params, &[]);
    let h = g.constant(Tensor::zeros(&[0, 8]));
    let y = m.fuse(&mut g, &mut b, Some(h), None).unwrap();
    assert_eq!(g.value(y).shape(), &[0, 16]);
    assert!(m.fuse(&mut g, &mut b, None, None).is_err());
    let out = m.encode(ModalityInput::new(Some(&Tensor::zeros(&[0, 5])), None).unwrap(), None).unwrap();
    assert_eq!(out.final_features.shape(), &[0, 16]);
}

#[test]
fn zero_fill_equivalence_holds_at_every_layer() {
    let m = Model::new(small_config(), 7).unwrap();
    let xa = feats(9, 5, 8);
    let mask = [2usize, 3];
    let auto = m.encode(ModalityInput::new(Some(&xa), None).unwrap(), Some(&mask)).unwrap();

    let mut g = Graph::new();
    let mut b = Binder::new(&m.params, &[]);
    let x = g.constant(xa.clone());
    let ha = m.frontend(&mut g, &mut b, "frontend_a", x).unwrap();
    let zeros = g.constant(Tensor::zeros(&[9, 8]));
    let fused = m.fuse(&mut g, &mut b, Some(ha), Some(zeros)).unwrap();
    let nodes = m.encode_fused(&mut g, &mut b, fused, &[9], &mask).unwrap();
    for (l, &n) in nodes.layers.iter().enumerate() {
        assert_eq!(&auto.layers[l], g.value(n), "layer {l}");
    }
    assert_eq!(&auto.final_features, g.value(nodes.final_features));
}

#[test]
fn encoder_returns_all_layers() {
    let m = Model::new(small_config(), 7).unwrap();
    let xb = feats(4, 7, 1);
    let out = m.encode(ModalityInput::new(None, Some(&xb)).unwrap(), None).unwrap();
    assert_eq!(out.layers.len(), 3);
    assert_eq!(out.depth(2), &out.final_features);
    let again = m.encode(ModalityInput::new(None, Some(&xb)).unwrap(), None).unwrap();
    assert_eq!(out, again);
}

#[test]
fn full_mask_makes_encoder_input_independent() {
    let m = Model::new(small_config(), 3).unwrap();
    let all: Vec<usize> = (0..6).collect();
    let (x1, x2) = (feats(6, 5, 1), feats(6, 5, 2));
    let o1 = m.encode(ModalityInput::new(Some(&x1), None).unwrap(), Some(&all)).unwrap();
    let o2 = m.encode(ModalityInput::new(Some(&x2), None).unwrap(), Some(&all)).unwrap();
    assert_eq!(o1, o2);
}

#[test]
fn mask_index_out_of_range_is_rejected() {
    let m = Model::new(small_config(), 3).unwrap();
    let x = feats(4, 5, 1);
    assert!(m.encode(ModalityInput::new(Some(&x), None).unwrap(), Some(&[4])).is_err());
}

#[test]
fn positional_information_breaks_permutation_equivariance() {
    let perm = [3usize, 0, 4, 1, 2];
    let x = feats(5, 5, 11);
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(x.row(p));
    }
    let px = Tensor::matrix(5, 5, px).unwrap();
    for positional in [false, true] {
        let m = Model::new(ModelConfig { positional_encoding: positional, ..small_config() }, 5).unwrap();
        let a = m.encode(ModalityInput::new(Some(&x), None).unwrap(), None).unwrap().final_features;
        let b = m.encode(ModalityInput::new(Some(&px), None).unwrap(), None).unwrap().final_features;
        let max_diff = perm
            .iter()
            .enumerate()
            .flat_map(|(i, &p)| b.row(i).iter().zip(a.row(p)).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        if positional {
            assert!(max_diff > 1e-3, "positions should matter, diff {max_diff}");
        } else {
            assert!(max_diff < 1e-12, "no positions: outputs should permute, diff {max_diff}");
        }
    }
}

#[test]
fn batched_encoding_keeps_utterances_separate() {
    let m = Model::new(small_config(), 9).unwrap();
    let (a1, b1) = (feats(5, 5, 1), feats(5, 7, 2));
    let a2 = feats(7, 5, 3);
    let items = [
        BatchItem { input: ModalityInput::new(Some(&a1), Some(&b1)).unwrap(), mask: &[1] },
        BatchItem { input: ModalityInput::new(Some(&a2), None).unwrap(), mask: &[] },
    ];
    let batched = m.encode_many(&items).unwrap();
    let single = m.encode(items[1].input, None).unwrap();
    for (x, y) in batched[1].final_features.data().iter().zip(single.final_features.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn frontend_grad_norms(m: &Model, with_b: bool) -> (f64, f64) {
    let xa = feats(6, 5, 1);
    let xb = feats(6, 7, 2);
    let trainable = vec![true; m.params.len()];
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params, &trainable);
    let input = ModalityInput::new(Some(&xa), with_b.then_some(&xb)).unwrap();
    let nodes = m.encode_batch(&mut g, &mut b, &[BatchItem { input, mask: &[0, 1, 2] }]).unwrap();
    let logits = m.cluster_logits_node(&mut g, &mut b, nodes.final_features).unwrap();
    let loss = g.cross_entropy(logits, &[0, 1, 2, 3, 4, 5], &[1.0; 6]).unwrap();
    let grads = g.backward(loss).unwrap();
    let norm = |prefix: &str| {
        m.params
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| grads.param(id).map_or(0.0, |t| t.sq_norm()))
            .sum::<f64>()
    };
    (norm("frontend_a"), norm("frontend_b"))
}

#[test]
fn gradients_reach_only_present_frontends() {
    let m = Model::new(small_config(), 4).unwrap();
    let (a, b) = frontend_grad_norms(&m, true);
    assert!(a > 0.0 && b > 0.0);
    let (a, b) = frontend_grad_norms(&m, false);
    assert!(a > 0.0);
    assert_eq!(b, 0.0);
}

#[test]
fn cluster_head_behaviour() {
    let mut m = Model::new(ModelConfig { n_clusters: 2, ..small_config() }, 4).unwrap();
    let wid = m.params.id("cluster_head.weight").unwrap();
    let logits = m.cluster_logits(&Tensor::zeros(&[3, 16])).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let mut w = vec![0.0; 32];
    w[0] = 2.0; // feature 0 -> cluster 0
    w[3] = -1.0; // feature 1 -> cluster 1
    *m.params.tensor_mut(wid) = Tensor::matrix(16, 2, w).unwrap();
    let mut f = vec![0.0; 16];
    f[0] = 0.5;
    f[1] = 3.0;
    let logits = m.cluster_logits(&Tensor::matrix(1, 16, f).unwrap()).unwrap();
    assert_eq!(logits.data(), &[1.0, -3.0]);
}

#[test]
fn decoder_is_causal_and_normalized() {
    let m = Model::new(small_config(), 2).unwrap().with_task_head(Task::Seq2Seq, 3).unwrap();
    let enc = feats(6, 16, 5);
    let bos = m.bos();
    let a = m.decoder_step(&enc, &[bos, 0, 1, 2]).unwrap();
    let b = m.decoder_step(&enc, &[bos, 0, 3, 1]).unwrap();
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
    for r in 0..4 {
        let lse = a.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-9);
    }
    assert!(m.decoder_step(&enc, &[bos, 99]).is_err());
    assert!(m.decoder_step(&enc, &[0, 1]).is_err());
}

#[test]
fn single_frame_cross_attention_ignores_query_and_key() {
    // With one encoder frame the attention weight is exactly 1, so the
    // query/key projections cannot matter.
    let mut m = Model::new(small_config(), 2).unwrap().with_task_head(Task::Seq2Seq, 3).unwrap();
    let enc = feats(1, 16, 6);
    let toks = [m.bos(), 1, 2];
    let before = m.decoder_step(&enc, &toks).unwrap();
    for name in ["decoder.block.0.cross_attn.q.weight", "decoder.block.0.cross_attn.k.weight"] {
        let id = m.params.id(name).unwrap();
        for v in m.params.tensor_mut(id).data_mut() {
            *v *= -3.0;
        }
    }
    let after = m.decoder_step(&enc, &toks).unwrap();
    for (x, y) in before.data().iter().zip(after.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn next_token_batch_matches_single_prefix() {
    let m = Model::new(small_config(), 2).unwrap().with_task_head(Task::Seq2Seq, 3).unwrap();
    let enc = feats(5, 16, 6);
    let p1 = [m.bos(), 2];
    let p2 = [m.bos(), 1, 0, 3];
    let batch = m.next_token_log_probs(&enc, &[&p1, &p2]).unwrap();
    let single = m.decoder_step(&enc, &p2).unwrap();
    for (x, y) in batch[1].iter().zip(single.row(3)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn task_head_replaces_cluster_head() {
    let m = Model::new(small_config(), 2).unwrap();
    let ft = m.with_task_head(Task::FrameTranscription, 1).unwrap();
    assert!(!ft.has_cluster_head() && ft.has_frame_head());
    assert_eq!(ft.params.get("encoder.block.1.ffn.fc1.weight"), m.params.get("encoder.block.1.ffn.fc1.weight"));
    assert_eq!(stage_of("encoder.block.1.ffn.fc1.weight"), Stage::Block(1));
    assert_eq!(stage_of("fusion.weight"), Stage::Input);
    assert_eq!(stage_of("encoder.final_ln.gamma"), Stage::FinalNorm);
    assert_eq!(stage_of("decoder.out.bias"), Stage::Head);
}

#[test]
fn two_block_encoder_gradcheck() {
    let m = Model::new(small_config(), 12).unwrap();
    let xa = feats(7, 5, 1);
    let xb = feats(7, 7, 2);
    let targets = [0usize, 1, 2, 3, 4, 5, 0];
    let trainable = vec![true; m.params.len()];
    let rep = grad_check(
        &m.params,
        |g, ps| {
            let mut b = Binder::new(ps, &trainable);
            let input = ModalityInput::new(Some(&xa), Some(&xb)).unwrap();
            let nodes = m.encode_batch(g, &mut b, &[BatchItem { input, mask: &[1, 2, 5] }])?;
            let logits = m.cluster_logits_node(g, &mut b, nodes.final_features)?;
            g.cross_entropy(logits, &targets, &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
        },
        1e-5,
        80,
        3,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}
