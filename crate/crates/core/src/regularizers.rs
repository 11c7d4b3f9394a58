//! Input-domain regularizers: bounded local energy and spatiotemporal
//! total variation, with analytic gradients.
//!
//! The energy term is a hard/soft pair on per-position channel vectors
//! x(i,j,k,·): it is `sum_{i,j,k} (sum_d x^2)^(alpha/2)` while every channel
//! norm stays within the radius `bound`, and +inf as soon as one leaves it.
//! The barrier half has no usable gradient; the optimizer enforces it by
//! projection, and [`r_b_gradient`] covers only the finite interior term.
//!
//! The TV term sums squared forward differences of the input, weighting the
//! two spatial axes by `kappa` and the temporal axis by `chi`:
//!
//!   sum_{i,j,k,d} kappa * ((dx)^2 + (dy)^2) + chi * (dt)^2
//!
//! `chi = 0` leaves temporal variation unpenalized, `chi = kappa` treats
//! space and time uniformly, and any other positive pair trades them off.
//! Differences use replicate boundaries (zero at the last index of each
//! axis), so constants have zero penalty and the adjoint is exact.

use crate::error::{Error, Result};
use crate::tensor::SpatiotemporalTensor;

/// Absolute slack accepted on the ball constraint; absorbs the rounding of
/// the radial projection so feasible iterates never trip the barrier.
pub const BALL_TOLERANCE: f64 = 1e-9;

/// Weights and constants that fully determine the regularization term of
/// one input stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerConfig {
    /// Allowed per-position channel norm (B).
    pub bound: f64,
    /// Exponent of the energy norm (alpha >= 1).
    pub alpha: f64,
    /// Spatial TV weight.
    pub kappa: f64,
    /// Temporal TV weight (slowness).
    pub chi: f64,
    /// Weight of the energy term in the objective.
    pub lambda_b: f64,
    /// Weight of the TV term in the objective.
    pub lambda_tv: f64,
    /// TV normalization scale (V) the default lambda_tv was derived from.
    pub tv_scale: f64,
}

impl RegularizerConfig {
    pub const DEFAULT_BOUND: f64 = 160.0;
    pub const DEFAULT_ALPHA: f64 = 3.0;

    /// Defaults for the appearance stream on an H x W input:
    /// B = 160, alpha = 3, V = B / 6.5, lambda_b = 1/(H W B^alpha),
    /// lambda_tv = 1/(H W V^2). Appearance is a single frame, so the
    /// temporal weight is zero.
    pub fn appearance_defaults(height: usize, width: usize) -> Self {
        let bound = Self::DEFAULT_BOUND;
        let alpha = Self::DEFAULT_ALPHA;
        let tv_scale = bound / 6.5;
        let hw = (height * width) as f64;
        Self {
            bound,
            alpha,
            kappa: 1.0,
            chi: 0.0,
            lambda_b: 1.0 / (hw * bound.powf(alpha)),
            lambda_tv: 1.0 / (hw * tv_scale * tv_scale),
            tv_scale,
        }
    }

    /// Defaults for the motion stream: as appearance, but the TV weight is
    /// ten times higher (flow is smoother than appearance) and time is
    /// penalized at the spatial rate until reconfigured.
    pub fn motion_defaults(height: usize, width: usize) -> Self {
        let mut cfg = Self::appearance_defaults(height, width);
        cfg.lambda_tv *= 10.0;
        cfg.kappa = 1.0;
        cfg.chi = 1.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0) {
            return Err(Error::config(format!("bound must be > 0, got {}", self.bound)));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::config(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.kappa >= 0.0) || !(self.chi >= 0.0) {
            return Err(Error::config(format!(
                "kappa and chi must be >= 0, got {} and {}",
                self.kappa, self.chi
            )));
        }
        if !(self.lambda_b >= 0.0) || !(self.lambda_tv >= 0.0) {
            return Err(Error::config(format!(
                "lambda weights must be >= 0, got {} and {}",
                self.lambda_b, self.lambda_tv
            )));
        }
        if !(self.tv_scale > 0.0) {
            return Err(Error::config(format!(
                "tv_scale must be > 0, got {}",
                self.tv_scale
            )));
        }
        Ok(())
    }
}

/// Bounded-energy value. Returns +inf as soon as any position's channel
/// norm exceeds the radius (beyond [`BALL_TOLERANCE`]); otherwise the sum of
/// channel norms raised to alpha.
pub fn r_b_value(x: &SpatiotemporalTensor, cfg: &RegularizerConfig) -> f64 {
    let limit = cfg.bound + BALL_TOLERANCE;
    let limit_sq = limit * limit;
    let half_alpha = cfg.alpha / 2.0;
    let mut acc = 0.0;
    for chunk in x.data().chunks_exact(x.channels()) {
        let sq: f64 = chunk.iter().map(|v| v * v).sum();
        if sq > limit_sq {
            return f64::INFINITY;
        }
        if sq > 0.0 {
            acc += sq.powf(half_alpha);
        }
    }
    acc
}

/// Analytic gradient of the finite part of the energy term:
/// `alpha * (sum_d x^2)^(alpha/2 - 1) * x(i,j,k,d)`, defined as zero where
/// the channel vector vanishes. Positions outside the ball are a domain
/// error; the barrier branch is handled by projection, not by gradient.
pub fn r_b_gradient(
    x: &SpatiotemporalTensor,
    cfg: &RegularizerConfig,
) -> Result<SpatiotemporalTensor> {
    let (h, w, t, c) = x.shape();
    let limit = cfg.bound + BALL_TOLERANCE;
    let limit_sq = limit * limit;
    let exponent = cfg.alpha / 2.0 - 1.0;
    let mut grad = vec![0.0; x.len()];
    for (pos, chunk) in x.data().chunks_exact(c).enumerate() {
        let sq: f64 = chunk.iter().map(|v| v * v).sum();
        if sq > limit_sq {
            let k = pos % t;
            let j = (pos / t) % w;
            let i = pos / (t * w);
            return Err(Error::OutsideBall {
                position: (i, j, k),
                norm: sq.sqrt(),
                bound: cfg.bound,
            });
        }
        if sq == 0.0 {
            continue;
        }
        let factor = cfg.alpha * sq.powf(exponent);
        let base = pos * c;
        for (d, v) in chunk.iter().enumerate() {
            grad[base + d] = factor * v;
        }
    }
    SpatiotemporalTensor::from_vec(h, w, t, c, grad)
}

/// Spatiotemporal total variation: squared forward differences along width
/// and height weighted by `kappa`, along frames weighted by `chi`.
///
/// Spatial contributions are subtotaled per frame and combined in
/// value-sorted order, so the spatial part — and with it the chi = 0 value —
/// is bit-exactly invariant under any permutation of the frames.
pub fn r_tv_value(x: &SpatiotemporalTensor, kappa: f64, chi: f64) -> f64 {
    let (h, w, t, c) = x.shape();
    let data = x.data();
    let step_j = t * c; // j + 1
    let step_i = w * t * c; // i + 1
    let step_k = c; // k + 1
    let mut frame_spatial = vec![0.0f64; t];
    let mut temporal = 0.0;
    for i in 0..h {
        for j in 0..w {
            for k in 0..t {
                let at = c * (k + t * (j + w * i));
                for d in 0..c {
                    let v = data[at + d];
                    if j + 1 < w {
                        let dx = data[at + d + step_j] - v;
                        frame_spatial[k] += dx * dx;
                    }
                    if i + 1 < h {
                        let dy = data[at + d + step_i] - v;
                        frame_spatial[k] += dy * dy;
                    }
                    if k + 1 < t {
                        let dt = data[at + d + step_k] - v;
                        temporal += dt * dt;
                    }
                }
            }
        }
    }
    frame_spatial.sort_unstable_by(f64::total_cmp);
    let spatial: f64 = frame_spatial.iter().sum();
    kappa * spatial + chi * temporal
}

/// Exact gradient of [`r_tv_value`] under the same discretization: each
/// forward difference `e = x(next) - x(cur)` contributes `-2*weight*e` at
/// `cur` and `+2*weight*e` at `next`.
pub fn r_tv_gradient(x: &SpatiotemporalTensor, kappa: f64, chi: f64) -> SpatiotemporalTensor {
    let (h, w, t, c) = x.shape();
    let data = x.data();
    let step_j = t * c;
    let step_i = w * t * c;
    let step_k = c;
    let mut grad = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            for k in 0..t {
                let at = c * (k + t * (j + w * i));
                for d in 0..c {
                    let v = data[at + d];
                    if j + 1 < w {
                        let e = 2.0 * kappa * (data[at + d + step_j] - v);
                        grad[at + d] -= e;
                        grad[at + d + step_j] += e;
                    }
                    if i + 1 < h {
                        let e = 2.0 * kappa * (data[at + d + step_i] - v);
                        grad[at + d] -= e;
                        grad[at + d + step_i] += e;
                    }
                    if k + 1 < t {
                        let e = 2.0 * chi * (data[at + d + step_k] - v);
                        grad[at + d] -= e;
                        grad[at + d + step_k] += e;
                    }
                }
            }
        }
    }
    SpatiotemporalTensor::from_vec(h, w, t, c, grad).expect("gradient of finite input is finite")
}
