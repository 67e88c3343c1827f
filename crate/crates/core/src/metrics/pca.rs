use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;

const TOLERANCE: f64 = 1e-9;
const MAX_ITERS: usize = 100_000;

/// Principal directions of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit-length direction per row, by decreasing variance.
    pub components: Tensor,
    /// Variance along each component (population covariance).
    pub explained_variance: Vec<f64>,
    /// Set when fewer components than requested carry variance.
    pub rank_deficient: bool,
}

impl Pca {
    /// Coordinates of `x` in the component basis.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.mean.len() {
            return Err(Error::shape("pca_transform", format!("{d} columns vs {} fitted", self.mean.len())));
        }
        let mut centered = x.clone();
        for i in 0..n {
            for (v, m) in centered.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let k = self.components.rows();
        let mut basis = vec![0.0; d * k];
        for c in 0..k {
            for j in 0..d {
                basis[j * k + c] = self.components.row(c)[j];
            }
        }
        centered.matmul(&Tensor::matrix(d, k, basis)?)
    }
}

/// Top `n_components` principal directions by power iteration with deflation.
pub fn pca(x: &Tensor, n_components: usize) -> Result<Pca> {
    let (n, d) = x.dims2()?;
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("pca needs a non-empty matrix".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let c: Vec<f64> = x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += c[a] * c[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= n as f64;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut r = rng::stream(0, "pca/start");
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut explained = Vec::new();
    let mut rank_deficient = false;
    for _ in 0..n_components.min(d) {
        let mut v: Vec<f64> = Tensor::randn(&[d], 1.0, &mut r).into_data();
        orthogonalize(&mut v, &components);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERS {
            let mut w = mat_vec(&cov, &v);
            project_out(&mut w, &components);
            let norm = dot(&w, &w).sqrt();
            if norm <= floor {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            v = w;
            lambda = dot(&v, &mat_vec(&cov, &v));
            if delta < TOLERANCE {
                break;
            }
        }
        if lambda <= floor {
            rank_deficient = true;
            break;
        }
        // Fix the sign so the largest-magnitude coordinate is positive.
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        components.push(v);
        explained.push(lambda);
    }
    if components.len() < n_components {
        rank_deficient = true;
    }
    let k = components.len();
    Ok(Pca {
        mean,
        components: Tensor::matrix(k, d, components.concat())?,
        explained_variance: explained,
        rank_deficient,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|a| dot(&m[a * d..(a + 1) * d], v)).collect()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Gram-Schmidt against already-found unit directions, then normalize.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    project_out(v, basis);
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}
