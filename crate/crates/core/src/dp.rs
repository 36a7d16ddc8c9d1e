//! DP-SGD: per-sample clipping and Gaussian noise on the summed gradient.

use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::model::{apply_step, loss_and_per_sample_gradients, Batch, ModelError, ParameterVector};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("noise multiplier must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("clipping norm must be positive, got {0}")]
    InvalidClipNorm(f64),
    #[error("sampling rate must lie in (0, 1], got {0}")]
    InvalidSampleRate(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DpParams {
    pub sigma: f64,
    pub clip_norm: f64,
    pub sample_rate: f64,
    pub delta: f64,
}

impl DpParams {
    pub fn new(sigma: f64, clip_norm: f64, sample_rate: f64, delta: f64) -> Result<Self, DpError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(DpError::InvalidSigma(sigma));
        }
        if !(clip_norm > 0.0 && clip_norm.is_finite()) {
            return Err(DpError::InvalidClipNorm(clip_norm));
        }
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(DpError::InvalidSampleRate(sample_rate));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(DpError::InvalidDelta(delta));
        }
        Ok(Self { sigma, clip_norm, sample_rate, delta })
    }

    /// Sampling rate `batch / n` and δ = 1/n for a client holding `n` samples.
    pub fn for_dataset(sigma: f64, clip_norm: f64, batch: usize, n: usize) -> Result<Self, DpError> {
        let n = n.max(2);
        let q = (batch as f64 / n as f64).min(1.0);
        Self::new(sigma, clip_norm, q, 1.0 / n as f64)
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    libm::sqrt(g.iter().map(|v| v * v).sum())
}

/// Scales `g` by `min(1, C/‖g‖)`. Vectors already within the ball are
/// returned unchanged, bit for bit.
pub fn clip(g: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm <= c {
        return g.to_vec();
    }
    let s = c / norm;
    g.iter().map(|v| v * s).collect()
}

/// `(Σ clip(g_i, C) + N(0, (σC)² I)) / B`. Noise is drawn only when σ > 0.
pub fn privatize<R: Rng + ?Sized>(per_sample: &[Vec<f64>], dp: &DpParams, rng: &mut R) -> Vec<f64> {
    let len = per_sample.first().map(Vec::len).unwrap_or(0);
    let mut sum = alloc::vec![0.0; len];
    for g in per_sample {
        for (s, v) in sum.iter_mut().zip(clip(g, dp.clip_norm)) {
            *s += v;
        }
    }
    if dp.sigma > 0.0 {
        let sd = dp.sigma * dp.clip_norm;
        for s in &mut sum {
            *s += sd * rng::standard_normal(rng);
        }
    }
    let b = per_sample.len() as f64;
    sum.iter_mut().for_each(|s| *s /= b);
    sum
}

/// One DP-SGD step on `batch`.
pub fn dp_sgd_step<R: Rng + ?Sized>(
    params: &ParameterVector,
    batch: &Batch,
    dp: &DpParams,
    lr: f64,
    rng: &mut R,
) -> Result<ParameterVector, ModelError> {
    let (_, grads) = loss_and_per_sample_gradients(params, batch)?;
    apply_step(params, &privatize(&grads, dp, rng), lr)
}
