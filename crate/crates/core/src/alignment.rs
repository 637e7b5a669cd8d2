//! Bhattacharyya alignment between batch distributions of embeddings.
//!
//! A batch is summarised by a diagonal Gaussian. In hyperbolic space the
//! batch is first pulled back to the tangent space at the origin with the
//! log map, so the hyperbolic distance is the Euclidean one on log-mapped
//! points and both agree as the curvature goes to zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, BallConfig, BallPoint, GeometryError};

pub const DEFAULT_VAR_FLOOR: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

/// Per-dimension mean and (floored) variance of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(AlignmentError::InvalidInput(format!(
                "mean has {} dims but var has {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(AlignmentError::InvalidInput("variances must be positive and finite".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub speech: f64,
    pub prompt: f64,
    pub lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { speech: 1.0, prompt: 0.5, lm: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Speech-speech alignment.
    pub l_ss: f64,
    /// Speech-prompt alignment.
    pub l_st: f64,
    /// Decision-token cross-entropy.
    pub l_lm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_ss: f64, l_st: f64, l_lm: f64, w: &LossWeights) -> Self {
        let total = w.speech * l_ss + w.prompt * l_st + w.lm * l_lm;
        Self { l_ss, l_st, l_lm, total }
    }
}

fn check_batch<V: AsRef<[f64]>>(batch: &[V]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| AlignmentError::InvalidInput("empty batch".into()))?.as_ref().len();
    if first == 0 {
        return Err(AlignmentError::InvalidInput("zero-dimensional vectors".into()));
    }
    for (i, v) in batch.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != first {
            return Err(AlignmentError::InvalidInput(format!(
                "dimension mismatch at batch index {i}: {} vs {first}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(AlignmentError::InvalidInput(format!("non-finite entry at batch index {i}")));
        }
    }
    Ok(first)
}

/// Per-dimension mean and biased (1/N) variance, floored at `var_floor`.
pub fn fit_gaussian<V: AsRef<[f64]>>(batch: &[V], var_floor: f64) -> Result<GaussianStats> {
    if !(var_floor > 0.0) {
        return Err(AlignmentError::InvalidInput(format!("var_floor must be positive, got {var_floor}")));
    }
    let dim = check_batch(batch)?;
    let n = batch.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in batch {
        for (m, x) in mean.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for v in batch {
        for ((s, x), m) in var.iter_mut().zip(v.as_ref()).zip(&mean) {
            let d = x - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / n).max(var_floor));
    Ok(GaussianStats { mean, var })
}

/// Closed-form Bhattacharyya distance between two diagonal Gaussians.
///
/// The per-dimension term is written so that swapping `p` and `q` performs
/// the same floating-point operations, which makes the result exactly
/// symmetric.
pub fn bhattacharyya_gaussian(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(AlignmentError::InvalidInput(format!("dimension mismatch: {} vs {}", p.dim(), q.dim())));
    }
    let mut total = 0.0;
    for i in 0..p.dim() {
        let diff = p.mean[i] - q.mean[i];
        let (v1, v2) = (p.var[i], q.var[i]);
        let avg = 0.5 * (v1 + v2);
        total += diff * diff / (8.0 * avg) + 0.5 * (avg.ln() - 0.5 * (v1.ln() + v2.ln()));
    }
    Ok(total)
}

pub fn bd_euclidean<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B], var_floor: f64) -> Result<f64> {
    let p = fit_gaussian(a, var_floor)?;
    let q = fit_gaussian(b, var_floor)?;
    bhattacharyya_gaussian(&p, &q)
}

/// Bhattacharyya distance of two batches of ball points, measured on their
/// log-mapped images in the tangent space at the origin.
pub fn bd_hyperbolic(a: &[BallPoint], b: &[BallPoint], cfg: &BallConfig, var_floor: f64) -> Result<f64> {
    let la = log_batch(a, cfg)?;
    let lb = log_batch(b, cfg)?;
    bd_euclidean(&la, &lb, var_floor)
}

fn log_batch(batch: &[BallPoint], cfg: &BallConfig) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|h| Ok(geometry::log_origin(h, cfg)?.into_inner())).collect()
}

/// Gradients of the alignment losses with respect to batch entries.
pub mod grad {
    use super::*;

    /// Per-row gradients for the two batches.
    pub type BatchGrads = (Vec<Vec<f64>>, Vec<Vec<f64>>);

    /// `(∂D/∂μ_p, ∂D/∂σ²_p, ∂D/∂μ_q, ∂D/∂σ²_q)`.
    pub fn bhattacharyya_gaussian(p: &GaussianStats, q: &GaussianStats) -> [Vec<f64>; 4] {
        let d = p.dim();
        let (mut gm1, mut gv1, mut gm2, mut gv2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        for i in 0..d {
            let diff = p.mean[i] - q.mean[i];
            let (v1, v2) = (p.var[i], q.var[i]);
            let avg = 0.5 * (v1 + v2);
            gm1[i] = diff / (4.0 * avg);
            gm2[i] = -gm1[i];
            let shared = -diff * diff / (16.0 * avg * avg) + 1.0 / (4.0 * avg);
            gv1[i] = shared - 1.0 / (4.0 * v1);
            gv2[i] = shared - 1.0 / (4.0 * v2);
        }
        [gm1, gv1, gm2, gv2]
    }

    /// Back-propagates mean/variance gradients to the batch that produced
    /// `stats`. Floored dimensions receive no variance gradient.
    pub fn fit_gaussian<V: AsRef<[f64]>>(
        batch: &[V],
        stats: &GaussianStats,
        var_floor: f64,
        g_mean: &[f64],
        g_var: &[f64],
    ) -> Vec<Vec<f64>> {
        let n = batch.len() as f64;
        let n_dims = stats.dim();
        // recompute the unfloored variance to locate the floor kink
        let mut raw_var = vec![0.0; n_dims];
        for v in batch {
            for ((s, x), m) in raw_var.iter_mut().zip(v.as_ref()).zip(&stats.mean) {
                let d = x - m;
                *s += d * d;
            }
        }
        let active: Vec<bool> = raw_var.iter().map(|s| s / n > var_floor).collect();
        batch
            .iter()
            .map(|v| {
                v.as_ref()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let mut g = g_mean[i] / n;
                        if active[i] {
                            g += g_var[i] * 2.0 * (x - stats.mean[i]) / n;
                        }
                        g
                    })
                    .collect()
            })
            .collect()
    }

    /// Gradient of [`super::bd_euclidean`] with respect to every entry of
    /// both batches, scaled by `upstream`.
    pub fn bd_euclidean<A: AsRef<[f64]>, B: AsRef<[f64]>>(
        a: &[A],
        b: &[B],
        var_floor: f64,
        upstream: f64,
    ) -> Result<BatchGrads> {
        let p = super::fit_gaussian(a, var_floor)?;
        let q = super::fit_gaussian(b, var_floor)?;
        if p.dim() != q.dim() {
            return Err(AlignmentError::InvalidInput(format!("dimension mismatch: {} vs {}", p.dim(), q.dim())));
        }
        let [mut gm1, mut gv1, mut gm2, mut gv2] = bhattacharyya_gaussian(&p, &q);
        for g in [&mut gm1, &mut gv1, &mut gm2, &mut gv2] {
            g.iter_mut().for_each(|x| *x *= upstream);
        }
        Ok((fit_gaussian(a, &p, var_floor, &gm1, &gv1), fit_gaussian(b, &q, var_floor, &gm2, &gv2)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], var: &[f64]) -> GaussianStats {
        GaussianStats::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn single_sample_hits_floor() {
        let s = fit_gaussian(&[vec![1.0, 1.0]], 1e-5).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.var, vec![1e-5, 1e-5]);
    }

    #[test]
    fn biased_variance() {
        let s = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 0.0]], 1e-5).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.var, vec![1.0, 1e-5]);
    }

    #[test]
    fn fit_rejects_bad_batches() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(fit_gaussian(&empty, 1e-5).is_err());
        assert!(fit_gaussian(&[vec![0.0, 1.0], vec![1.0]], 1e-5).is_err());
    }

    #[test]
    fn closed_form_cases() {
        let p = stats(&[0.0], &[1.0]);
        assert_eq!(bhattacharyya_gaussian(&p, &p).unwrap(), 0.0);
        let q = stats(&[2.0], &[1.0]);
        assert!((bhattacharyya_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        let r = stats(&[0.0], &[4.0]);
        let expect = 0.5 * (2.5f64 / 2.0).ln();
        assert!((bhattacharyya_gaussian(&p, &r).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.111_57).abs() < 1e-5);
    }

    #[test]
    fn euclidean_batches() {
        let a = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let shuffled = vec![vec![2.0, 0.0], vec![0.0, 0.0]];
        assert_eq!(bd_euclidean(&a, &a, 1e-5).unwrap(), 0.0);
        assert_eq!(bd_euclidean(&a, &shuffled, 1e-5).unwrap(), 0.0);
        let b = vec![vec![4.0, 0.0], vec![6.0, 0.0]];
        assert!((bd_euclidean(&a, &b, 1e-5).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hyperbolic_recovers_tangent_stats() {
        // tangent samples {-1, 1} have mean 0 and biased variance 1
        let cfg = BallConfig::new(1.0).unwrap();
        let lift = |xs: &[f64]| -> Vec<BallPoint> {
            xs.iter()
                .map(|&x| geometry::exp_origin(&geometry::TangentVector::new(vec![x]).unwrap(), &cfg).unwrap())
                .collect()
        };
        let a = lift(&[-1.0, 1.0]);
        let b = lift(&[1.0, 3.0]);
        let d = bd_hyperbolic(&a, &b, &cfg, 1e-5).unwrap();
        assert!((d - 0.5).abs() < 1e-9, "{d}");
        assert_eq!(bd_hyperbolic(&a, &a, &cfg, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn hyperbolic_boundary_error_propagates() {
        let cfg = BallConfig::new(1.0).unwrap();
        let bad = vec![BallPoint::new(vec![0.5], &BallConfig::new(0.1).unwrap()).unwrap()];
        let ok = vec![BallPoint::origin(1)];
        // 0.5 is fine for c = 0.1 but not for c = 4
        let steep = BallConfig::new(4.0).unwrap();
        assert!(bd_hyperbolic(&bad, &ok, &cfg, 1e-5).is_ok());
        assert!(matches!(bd_hyperbolic(&bad, &ok, &steep, 1e-5), Err(AlignmentError::Geometry(_))));
    }

    #[test]
    fn loss_breakdown_total() {
        let w = LossWeights::default();
        let l = LossBreakdown::new(2.0, 4.0, 1.0, &w);
        assert_eq!(l.total, 2.0 + 2.0 + 1.0);
    }
}
