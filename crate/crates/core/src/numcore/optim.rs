use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { beta1, beta2, eps, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Rebuild a state from its parts, e.g. when loading a checkpoint.
    /// `moments[i]` belongs to parameter `i`.
    pub fn from_parts(beta1: f64, beta2: f64, eps: f64, step: u64, moments: Vec<Option<(Tensor, Tensor)>>) -> Self {
        AdamState { beta1, beta2, eps, step, moments }
    }

    /// Moment slots in parameter order.
    pub fn moment_slots(&self) -> &[Option<(Tensor, Tensor)>] {
        &self.moments
    }

    /// First and second moments of a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(id.0).and_then(Option::as_ref)
    }

    /// Apply one update to every parameter that has a gradient.
    ///
    /// The whole step is rejected, leaving `params` untouched, if any
    /// gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (id, g) in grads.params() {
            if id.0 >= params.len() || params.tensor(id).shape() != g.shape() {
                return Err(Error::shape("adam_step", format!("gradient {:?} for parameter {}", g.shape(), id.0)));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.params() {
            let p = params.tensor_mut(id);
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::InvalidArgument("gradient norm is not finite".into()));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.params_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::rng;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::vector(vec![value]));
        (ps, id)
    }

    fn grad_of(id: ParamId, g: f64) -> Gradients {
        Gradients::from_params(BTreeMap::from([(id, Tensor::vector(vec![g]))]))
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut ps, id) = single(0.3);
        let before = ps.clone();
        let mut st = AdamState::default();
        st.step(&mut ps, &grad_of(id, 0.0), 0.1).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        let (mut ps, id) = single(1.0);
        let mut st = AdamState::default();
        st.step(&mut ps, &grad_of(id, 1.0), 0.1).unwrap();
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.tensor(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_parabola() {
        let (mut ps, id) = single(1.0);
        let mut st = AdamState::default();
        for _ in 0..100 {
            let x = ps.tensor(id).item();
            st.step(&mut ps, &grad_of(id, 2.0 * x), 0.1).unwrap();
        }
        assert!(ps.tensor(id).item().abs() < 0.1, "x = {}", ps.tensor(id).item());
        assert_eq!(st.step_count(), 100);
    }

    #[test]
    fn rejects_non_finite_gradient_by_name() {
        let (mut ps, id) = single(1.0);
        let mut st = AdamState::default();
        let err = st.step(&mut ps, &grad_of(id, f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "x"));
        assert_eq!(ps.tensor(id).item(), 1.0);
    }

    fn random_grads(seed: u64, scale: f64) -> Gradients {
        let mut r = rng::stream(seed, "clip");
        let mut m = BTreeMap::new();
        m.insert(ParamId(0), Tensor::randn(&[3, 4], scale, &mut r));
        m.insert(ParamId(1), Tensor::randn(&[5], scale, &mut r));
        Gradients::from_params(m)
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut g = Gradients::from_params(BTreeMap::from([(ParamId(0), Tensor::vector(vec![0.3, 0.4]))]));
        let norm = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(g.param(ParamId(0)).unwrap().data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_scales_homogeneously() {
        let mut g = Gradients::from_params(BTreeMap::from([(ParamId(0), Tensor::vector(vec![0.0, 4.0, 0.0]))]));
        let norm = clip_grad_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 4.0);
        assert_eq!(g.param(ParamId(0)).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn clip_norm_is_min_of_pre_norm_and_limit() {
        for seed in 0..20 {
            let scale = if seed % 2 == 0 { 0.05 } else { 2.0 };
            let mut g = random_grads(seed, scale);
            let pre = clip_grad_norm(&mut g, 1.0).unwrap();
            // recompute independently
            let post: f64 = g.params().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            assert!((post - pre.min(1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn clip_is_idempotent() {
        let mut once = random_grads(3, 2.0);
        clip_grad_norm(&mut once, 1.0).unwrap();
        let mut twice = random_grads(3, 2.0);
        clip_grad_norm(&mut twice, 1.0).unwrap();
        clip_grad_norm(&mut twice, 1.0).unwrap();
        for ((_, a), (_, b)) in once.params().zip(twice.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn clip_rejects_non_positive_limit() {
        let mut g = random_grads(1, 1.0);
        assert!(clip_grad_norm(&mut g, 0.0).is_err());
    }
}
