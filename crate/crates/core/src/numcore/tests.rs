use super::*;
use crate::error::Result;
use crate::rng;

fn store(tensors: Vec<(&str, Tensor)>) -> ParamStore {
    let mut ps = ParamStore::new();
    for (n, t) in tensors {
        ps.insert(n, t);
    }
    ps
}

fn p(g: &mut Graph, ps: &ParamStore, name: &str) -> NodeId {
    let id = ps.id(name).unwrap();
    g.param(id, ps.tensor(id), true)
}

/// Reduce any tensor to a scalar with fixed random weights, so every output
/// coordinate contributes a distinct gradient.
fn probe(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng::stream(seed, "probe"));
    let w = g.constant(w);
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

fn check(ps: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Result<NodeId>) -> f64 {
    let rep = grad_check(ps, build, 1e-5, 60, 5).unwrap();
    rep.max_rel_error
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::stream(seed, "init"))
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.softmax(x);
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[7, 9], 5.0, &mut rng::stream(1, "sm")));
    let y = g.softmax(x);
    for row in g.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero_before_affine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 5], 2.0));
    let gamma = g.constant(Tensor::full(&[5], 1.7));
    let beta = g.constant(Tensor::zeros(&[5]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // non-representable constants round to ~0 rather than exactly 0
    let x = g.constant(Tensor::full(&[1, 3], 0.1));
    let beta = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    for (v, b) in g.value(y).data().iter().zip([0.5, -1.0, 2.0]) {
        assert!((v - b).abs() < 1e-9);
    }
}

#[test]
fn matmul_matches_hand_product() {
    let a = randn(&[2, 3], 42);
    let b = randn(&[3, 2], 43);
    let mut g = Graph::new();
    let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(an, bn).unwrap();
    let mut oracle = [0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..3 {
                oracle[i * 2 + j] += a.data()[i * 3 + k] * b.data()[k * 2 + j];
            }
        }
    }
    for (x, y) in g.value(c).data().iter().zip(oracle) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("2x3 @ 2x3"), "{err}");
    let tall = g_rows(&mut g, 4);
    let err = g.concat_lastdim(a, tall).unwrap_err().to_string();
    assert!(err.contains("concat_lastdim"), "{err}");
    let table = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.embedding(table, &[4]).unwrap_err().to_string();
    assert!(err.contains("embedding_lookup"), "{err}");
}

fn g_rows(g: &mut Graph, n: usize) -> NodeId {
    g.constant(Tensor::zeros(&[n, 1]))
}

#[test]
fn sum_has_unit_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(randn(&[3, 4], 2), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.leaf(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn half_squared_norm_has_identity_gradient() {
    let xv = randn(&[5], 3);
    let mut g = Graph::new();
    let x = g.leaf(xv.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.leaf(x).unwrap().data(), xv.data());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(randn(&[3], 2), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn cross_entropy_is_zero_only_for_confident_match() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::matrix(2, 3, vec![800.0, 0.0, 0.0, 0.0, 0.0, 800.0]).unwrap());
    let l = g.cross_entropy(logits, &[0, 2], &[1.0, 1.0]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let logits = g.constant(randn(&[4, 5], 9));
    let l = g.cross_entropy(logits, &[0, 1, 2, 3], &[1.0; 4]).unwrap();
    assert!(g.value(l).item() > 0.0);
    let logits = g.constant(Tensor::zeros(&[3, 40]));
    let l = g.cross_entropy(logits, &[0, 5, 39], &[1.0; 3]).unwrap();
    assert!((g.value(l).item() - 40f64.ln()).abs() < 1e-12);
}

#[test]
fn gradcheck_each_primitive() {
    // matmul + add_bias
    let ps = store(vec![("a", randn(&[3, 4], 1)), ("b", randn(&[4, 2], 2)), ("c", randn(&[2], 3))]);
    let e = check(&ps, |g, ps| {
        let (a, b, c) = (p(g, ps, "a"), p(g, ps, "b"), p(g, ps, "c"));
        let m = g.matmul(a, b)?;
        let y = g.add_bias(m, c)?;
        probe(g, y, 1)
    });
    assert!(e < 1e-6, "matmul {e}");

    let ps = store(vec![("x", randn(&[3, 6], 4)), ("g", randn(&[6], 5)), ("b", randn(&[6], 6))]);
    let e = check(&ps, |g, ps| {
        let (x, ga, b) = (p(g, ps, "x"), p(g, ps, "g"), p(g, ps, "b"));
        let y = g.layer_norm(x, ga, b)?;
        probe(g, y, 2)
    });
    assert!(e < 1e-4, "layer_norm {e}");

    let ps = store(vec![("x", randn(&[3, 5], 7))]);
    let e = check(&ps, |g, ps| {
        let x = p(g, ps, "x");
        let y = g.softmax(x);
        probe(g, y, 3)
    });
    assert!(e < 1e-4, "softmax {e}");
    let e = check(&ps, |g, ps| {
        let x = p(g, ps, "x");
        let y = g.log_softmax(x);
        probe(g, y, 4)
    });
    assert!(e < 1e-4, "log_softmax {e}");
    let e = check(&ps, |g, ps| {
        let x = p(g, ps, "x");
        let y = g.gelu(x);
        probe(g, y, 5)
    });
    assert!(e < 1e-4, "gelu {e}");
    let e = check(&ps, |g, ps| {
        let x = p(g, ps, "x");
        g.cross_entropy(x, &[0, 4, 2], &[1.0, 0.5, 2.0])
    });
    assert!(e < 1e-4, "cross_entropy {e}");

    let ps = store(vec![("t", randn(&[5, 3], 8)), ("u", randn(&[4, 2], 9)), ("f", randn(&[3], 10))]);
    let e = check(&ps, |g, ps| {
        let t = p(g, ps, "t");
        let e = g.embedding(t, &[1, 1, 4, 0])?;
        let u = p(g, ps, "u");
        let c = g.concat_lastdim(e, u)?;
        let s = g.scatter_rows(c, &[0, 2, 3, 5], 6)?;
        probe(g, s, 6)
    });
    assert!(e < 1e-4, "embedding/concat/scatter {e}");
    let e = check(&ps, |g, ps| {
        let t = p(g, ps, "t");
        let f = p(g, ps, "f");
        let r = g.replace_rows(t, f, &[1, 3])?;
        let r2 = g.scale(r, 1.5);
        probe(g, r2, 7)
    });
    assert!(e < 1e-4, "replace_rows {e}");
}

#[test]
fn gradcheck_attention_block_diagonal_and_causal() {
    let ps = store(vec![("q", randn(&[7, 8], 11)), ("k", randn(&[9, 8], 12)), ("v", randn(&[9, 8], 13))]);
    let segs = [
        Segment { q_start: 0, q_len: 3, kv_start: 0, kv_len: 5 },
        Segment { q_start: 3, q_len: 4, kv_start: 5, kv_len: 4 },
    ];
    let e = check(&ps, |g, ps| {
        let (q, k, v) = (p(g, ps, "q"), p(g, ps, "k"), p(g, ps, "v"));
        let y = g.attention(q, k, v, 2, &segs, false)?;
        probe(g, y, 8)
    });
    assert!(e < 1e-4, "attention {e}");

    let ps = store(vec![("x", randn(&[6, 8], 14))]);
    let segs = [Segment::square(0, 2), Segment::square(2, 4)];
    let e = check(&ps, |g, ps| {
        let x = p(g, ps, "x");
        let y = g.attention(x, x, x, 4, &segs, true)?;
        probe(g, y, 9)
    });
    assert!(e < 1e-4, "causal attention {e}");
}

#[test]
fn attention_segments_do_not_leak() {
    let x = randn(&[6, 4], 21);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let n = g.constant(x.clone());
        let y = g.attention(n, n, n, 2, &[Segment::square(0, 3), Segment::square(3, 3)], false).unwrap();
        g.value(y).clone()
    };
    let base = run(&x);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[12..] {
        *v += 1.0;
    }
    let changed = run(&x2);
    assert_eq!(&base.data()[..12], &changed.data()[..12]);
}

#[test]
fn two_layer_composite_matches_finite_differences() {
    let ps = store(vec![
        ("w1", randn(&[5, 8], 31)),
        ("b1", randn(&[8], 32)),
        ("w2", randn(&[8, 3], 33)),
        ("b2", randn(&[3], 34)),
    ]);
    let x = randn(&[6, 5], 35);
    let e = check(&ps, |g, ps| {
        let xin = g.constant(x.clone());
        let (w1, b1, w2, b2) = (p(g, ps, "w1"), p(g, ps, "b1"), p(g, ps, "w2"), p(g, ps, "b2"));
        let h = g.matmul(xin, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_bias(o, b2)?;
        g.cross_entropy(o, &[0, 1, 2, 0, 1, 2], &[1.0; 6])
    });
    assert!(e < 1e-4, "composite {e}");
}

#[test]
fn linear_layer_gradcheck_is_tight() {
    let ps = store(vec![("w", randn(&[4, 3], 41)), ("b", randn(&[3], 42))]);
    let x = randn(&[5, 4], 43);
    let e = check(&ps, |g, ps| {
        let xin = g.constant(x.clone());
        let (w, b) = (p(g, ps, "w"), p(g, ps, "b"));
        let y = g.matmul(xin, w)?;
        let y = g.add_bias(y, b)?;
        probe(g, y, 10)
    });
    assert!(e < 1e-6, "linear {e}");
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let ps = store(vec![("x", randn(&[4, 4], 51))]);
    let build = |g: &mut Graph, ps: &ParamStore| {
        let x = p(g, ps, "x");
        let y = g.gelu(x);
        probe(g, y, 11)
    };
    let rep = grad_check_with(&ps, build, 1e-5, 60, 5, |g| g.inject_fault(Fault::GeluBackwardScale(1.1))).unwrap();
    assert!(rep.max_rel_error > 1e-2, "{}", rep.max_rel_error);
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let ps = store(vec![("a", randn(&[2, 2], 61)), ("b", randn(&[2, 2], 62))]);
    let mut g = Graph::new();
    let a = g.param(ps.id("a").unwrap(), ps.tensor(ps.id("a").unwrap()), true);
    let b = g.param(ps.id("b").unwrap(), ps.tensor(ps.id("b").unwrap()), false);
    let m = g.matmul(a, b).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.param(ps.id("a").unwrap()).is_some());
    assert!(grads.param(ps.id("b").unwrap()).is_none());
}

#[test]
fn empty_inputs_are_vacuous() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[0, 4]));
    let w = g.constant(randn(&[4, 3], 1));
    let y = g.matmul(x, w).unwrap();
    assert_eq!(g.value(y).shape(), &[0, 3]);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let z = g.layer_norm(y, gamma, beta).unwrap();
    let a = g.attention(z, z, z, 1, &[Segment::square(0, 0)], false).unwrap();
    assert_eq!(g.value(a).shape(), &[0, 3]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_normalizes(vals in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let n = vals.len();
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(1, n, vals).unwrap());
            let y = g.softmax(x);
            prop_assert!((g.value(y).sum() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cross_entropy_is_non_negative(vals in proptest::collection::vec(-20.0f64..20.0, 6), t in 0usize..3) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(2, 3, vals).unwrap());
            let l = g.cross_entropy(x, &[t, 2 - t.min(2)], &[1.0, 1.0]).unwrap();
            prop_assert!(g.value(l).item() >= 0.0);
        }

        #[test]
        fn computation_is_deterministic(seed in 0u64..1000) {
            let run = || {
                let mut g = Graph::new();
                let x = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng::stream(seed, "det")));
                let y = g.attention(x, x, x, 2, &[Segment::square(0, 4)], true).unwrap();
                let y = g.gelu(y);
                g.value(y).clone()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
