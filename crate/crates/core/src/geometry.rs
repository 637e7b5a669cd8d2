//! Poincaré-ball primitives with curvature `-c`.
//!
//! The ball of curvature `-c` is the open set `{x : ‖x‖ < 1/√c}`. Every map
//! here is taken at the origin, which is all the fusion model needs: the
//! exponential map sends tangent vectors onto the ball, the logarithmic map
//! sends them back, and Möbius addition plays the role of vector addition.
//!
//! Each differentiable map has a matching vector-Jacobian product in
//! [`grad`], used by the model's hand-written backward pass.

use thiserror::Error;

/// Norms below this take the series branch of the origin maps.
pub const SERIES_NORM: f64 = 1e-12;
const MOBIUS_MIN_DENOMINATOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("point with scaled norm {scaled_norm} lies on or outside the ball boundary")]
    Boundary { scaled_norm: f64 },
    #[error("Möbius addition denominator {0:e} is degenerate")]
    Singularity(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BallConfig {
    /// Curvature magnitude; the ball has curvature `-c`.
    pub c: f64,
    /// Relative margin kept between projected points and the boundary.
    pub eps_ball: f64,
    /// Margin applied to the `artanh` argument in the log map.
    pub eps_tanh: f64,
}

impl BallConfig {
    pub const DEFAULT_EPS_BALL: f64 = 1e-5;
    pub const DEFAULT_EPS_TANH: f64 = 1e-7;

    pub fn new(c: f64) -> Result<Self> {
        Self::with_margins(c, Self::DEFAULT_EPS_BALL, Self::DEFAULT_EPS_TANH)
    }

    pub fn with_margins(c: f64, eps_ball: f64, eps_tanh: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(GeometryError::InvalidInput(format!("curvature must be positive, got {c}")));
        }
        if !(eps_ball > 0.0 && eps_ball < 1e-3) {
            return Err(GeometryError::InvalidInput(format!("eps_ball must be in (0, 1e-3), got {eps_ball}")));
        }
        if !(eps_tanh > 0.0 && eps_tanh < 1e-3) {
            return Err(GeometryError::InvalidInput(format!("eps_tanh must be in (0, 1e-3), got {eps_tanh}")));
        }
        Ok(Self { c, eps_ball, eps_tanh })
    }

    pub fn sqrt_c(&self) -> f64 {
        self.c.sqrt()
    }

    /// Largest norm a projected point may have.
    pub fn max_norm(&self) -> f64 {
        (1.0 - self.eps_ball) / self.sqrt_c()
    }
}

impl Default for BallConfig {
    fn default() -> Self {
        Self { c: 1.0, eps_ball: Self::DEFAULT_EPS_BALL, eps_tanh: Self::DEFAULT_EPS_TANH }
    }
}

/// A vector in the tangent space at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A point strictly inside the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    pub fn new(values: Vec<f64>, cfg: &BallConfig) -> Result<Self> {
        check_finite(&values)?;
        let scaled = norm(&values) * cfg.sqrt_c();
        if scaled >= 1.0 {
            return Err(GeometryError::Boundary { scaled_norm: scaled });
        }
        Ok(Self(values))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(GeometryError::InvalidInput(format!("non-finite entry at index {i}"))),
        None => Ok(()),
    }
}

/// `tanh(s)/s` and its derivative with respect to `s`, with a series branch near zero.
fn tanh_ratio(s: f64) -> (f64, f64) {
    if s < 1e-3 {
        let s2 = s * s;
        (1.0 - s2 / 3.0 + 2.0 * s2 * s2 / 15.0, -2.0 * s / 3.0 + 8.0 * s2 * s / 15.0)
    } else {
        let t = s.tanh();
        let sech2 = 1.0 - t * t;
        (t / s, (s * sech2 - t) / (s * s))
    }
}

/// `artanh(s)/s` and its derivative with respect to `s`.
fn artanh_ratio(s: f64) -> (f64, f64) {
    if s < 1e-3 {
        let s2 = s * s;
        (1.0 + s2 / 3.0 + s2 * s2 / 5.0, 2.0 * s / 3.0 + 4.0 * s2 * s / 5.0)
    } else {
        let a = s.atanh();
        (a / s, (s / (1.0 - s * s) - a) / (s * s))
    }
}

/// Raw exponential map without the final projection.
fn exp_scale(n: f64, cfg: &BallConfig) -> f64 {
    tanh_ratio(cfg.sqrt_c() * n).0
}

/// Maps a tangent vector at the origin onto the ball.
pub fn exp_origin(u: &TangentVector, cfg: &BallConfig) -> Result<BallPoint> {
    check_finite(u.as_slice())?;
    let n = norm(u.as_slice());
    if n < SERIES_NORM {
        return Ok(BallPoint(u.as_slice().to_vec()));
    }
    let scale = exp_scale(n, cfg);
    let raw: Vec<f64> = u.as_slice().iter().map(|x| x * scale).collect();
    project_to_ball(&raw, cfg)
}

/// Maps a ball point back to the tangent space at the origin.
pub fn log_origin(h: &BallPoint, cfg: &BallConfig) -> Result<TangentVector> {
    let values = h.as_slice();
    check_finite(values)?;
    let n = norm(values);
    let scaled = n * cfg.sqrt_c();
    if scaled >= 1.0 {
        return Err(GeometryError::Boundary { scaled_norm: scaled });
    }
    if n < SERIES_NORM {
        return Ok(TangentVector(values.to_vec()));
    }
    let s = scaled.min(1.0 - cfg.eps_tanh);
    let scale = artanh_ratio(s).0 * s / scaled;
    Ok(TangentVector(values.iter().map(|x| x * scale).collect()))
}

/// Möbius addition `x ⊕_c y`, re-projected into the ball.
pub fn mobius_add(x: &BallPoint, y: &BallPoint, cfg: &BallConfig) -> Result<BallPoint> {
    let (xs, ys) = (x.as_slice(), y.as_slice());
    if xs.len() != ys.len() {
        return Err(GeometryError::DimensionMismatch(xs.len(), ys.len()));
    }
    let raw = mobius_raw(xs, ys, cfg.c)?;
    project_to_ball(&raw, cfg)
}

fn mobius_raw(x: &[f64], y: &[f64], c: f64) -> Result<Vec<f64>> {
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    if den.abs() < MOBIUS_MIN_DENOMINATOR {
        return Err(GeometryError::Singularity(den));
    }
    Ok(x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect())
}

/// Rescales `v` onto the ball's safety radius when it reaches past it.
pub fn project_to_ball(v: &[f64], cfg: &BallConfig) -> Result<BallPoint> {
    check_finite(v)?;
    let n = norm(v);
    let max = cfg.max_norm();
    if n < max {
        return Ok(BallPoint(v.to_vec()));
    }
    let scale = max / n;
    Ok(BallPoint(v.iter().map(|x| x * scale).collect()))
}

/// Vector-Jacobian products of the ball maps.
///
/// Each function takes the forward inputs plus the upstream gradient of the
/// loss with respect to the forward output and returns the gradient with
/// respect to the inputs. Branch choices (series, clamp, projection) mirror
/// the forward pass exactly.
pub mod grad {
    use super::*;

    /// VJP of `v ↦ f(‖v‖)·v` given `f` and `f'` at the current norm.
    fn radial_vjp(v: &[f64], upstream: &[f64], f: f64, df_over_n: f64) -> Vec<f64> {
        let proj = dot(v, upstream) * df_over_n;
        v.iter().zip(upstream).map(|(vi, gi)| f * gi + proj * vi).collect()
    }

    pub fn project_to_ball(v: &[f64], upstream: &[f64], cfg: &BallConfig) -> Vec<f64> {
        let n = norm(v);
        let max = cfg.max_norm();
        if n < max {
            return upstream.to_vec();
        }
        // f(n) = max/n, f'(n)/n = -max/n³
        radial_vjp(v, upstream, max / n, -max / (n * n * n))
    }

    pub fn exp_origin(u: &[f64], upstream: &[f64], cfg: &BallConfig) -> Vec<f64> {
        let n = norm(u);
        if n < SERIES_NORM {
            return upstream.to_vec();
        }
        let sc = cfg.sqrt_c();
        let (f, df_ds) = tanh_ratio(sc * n);
        let raw: Vec<f64> = u.iter().map(|x| x * f).collect();
        let g_raw = project_to_ball(&raw, upstream, cfg);
        radial_vjp(u, &g_raw, f, df_ds * sc / n)
    }

    pub fn log_origin(h: &[f64], upstream: &[f64], cfg: &BallConfig) -> Vec<f64> {
        let n = norm(h);
        if n < SERIES_NORM {
            return upstream.to_vec();
        }
        let sc = cfg.sqrt_c();
        let scaled = sc * n;
        let limit = 1.0 - cfg.eps_tanh;
        if scaled > limit {
            // scale = artanh(limit)/(√c n): only the 1/n factor varies
            let k = limit.atanh() / sc;
            return radial_vjp(h, upstream, k / n, -k / (n * n * n));
        }
        let (f, df_ds) = artanh_ratio(scaled);
        radial_vjp(h, upstream, f, df_ds * sc / n)
    }

    /// Returns `(∂L/∂x, ∂L/∂y)` for `x ⊕_c y` followed by projection.
    pub fn mobius_add(x: &[f64], y: &[f64], upstream: &[f64], cfg: &BallConfig) -> (Vec<f64>, Vec<f64>) {
        let c = cfg.c;
        let xy = dot(x, y);
        let x2 = dot(x, x);
        let y2 = dot(y, y);
        let a = 1.0 + 2.0 * c * xy + c * y2;
        let b = 1.0 - c * x2;
        let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
        let numer: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect();
        let raw: Vec<f64> = numer.iter().map(|v| v / den).collect();
        let g = project_to_ball(&raw, upstream, cfg);

        let gx_dot = dot(x, &g);
        let gy_dot = dot(y, &g);
        let g_den = -dot(&g, &numer) / (den * den);

        let gx = (0..x.len())
            .map(|i| {
                (a * g[i] + 2.0 * c * gx_dot * y[i] - 2.0 * c * gy_dot * x[i]) / den
                    + g_den * (2.0 * c * y[i] + 2.0 * c * c * y2 * x[i])
            })
            .collect();
        let gy = (0..y.len())
            .map(|i| {
                (b * g[i] + gx_dot * (2.0 * c * x[i] + 2.0 * c * y[i])) / den
                    + g_den * (2.0 * c * x[i] + 2.0 * c * c * x2 * y[i])
            })
            .collect();
        (gx, gy)
    }
}
