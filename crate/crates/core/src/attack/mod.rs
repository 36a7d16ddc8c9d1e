//! Gradient reconstruction attacks and their success metric.
//!
//! Passive attacks (DLG, Inverting) match gradients of a dummy input against
//! the gradient an honest-but-curious server infers from two plaintext model
//! versions. Active attacks (CAH, RTF) additionally replace the first dense
//! layer and invert its gradients analytically. Success is image
//! identifiability precision against a fixed candidate pool.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::fl::RoundData;
use crate::he::{AttackerView, EncryptionMask, HeError};
use crate::model::ModelError;

mod active;
pub mod lbfgs;
pub mod matching;
mod passive;
mod trial;

pub use active::{cah_attack, cah_model, cah_sources, row_activations, rtf_attack, rtf_model, rtf_sources};
pub use passive::{dlg_attack, infer_label, inverting_attack};
pub use trial::{run_trial, success_rate, trial_seed, trial_settings, AttackEnv, TrialSetting};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("learning rate must be non-zero to infer a gradient")]
    ZeroLearningRate,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("target index {0} is outside the candidate pool")]
    TargetOutOfPool(usize),
    #[error("invalid attack configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    He(#[from] HeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum AttackKind {
    #[cfg_attr(feature = "serde", serde(rename = "DLG"))]
    Dlg,
    #[cfg_attr(feature = "serde", serde(rename = "Inverting"))]
    Inverting,
    #[cfg_attr(feature = "serde", serde(rename = "CAH"))]
    Cah,
    #[cfg_attr(feature = "serde", serde(rename = "RTF"))]
    Rtf,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Dlg, AttackKind::Inverting, AttackKind::Cah, AttackKind::Rtf];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Dlg => "DLG",
            AttackKind::Inverting => "Inverting",
            AttackKind::Cah => "CAH",
            AttackKind::Rtf => "RTF",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    /// Active attackers modify the model before the client step.
    pub fn is_active(&self) -> bool {
        matches!(self, AttackKind::Cah | AttackKind::Rtf)
    }
}

impl core::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Optimizer iterations (passive attacks).
    pub iterations: usize,
    /// Total-variation weight (Inverting).
    pub tv_weight: f64,
    /// Initial signed-Adam step size (Inverting).
    pub step_size: f64,
    /// Imprint bins (RTF).
    pub bins: usize,
    /// Trap rows (CAH).
    pub trap_rows: usize,
    /// Samples in the attacked client step; 1 for passive attacks.
    pub batch_size: usize,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        let base = Self { kind, iterations: 0, tv_weight: 0.0, step_size: 0.0, bins: 0, trap_rows: 0, batch_size: 1 };
        match kind {
            AttackKind::Dlg => Self { iterations: 300, ..base },
            AttackKind::Inverting => Self { iterations: 1000, tv_weight: 1e-3, step_size: 0.1, ..base },
            AttackKind::Cah => Self { trap_rows: 64, batch_size: 8, ..base },
            AttackKind::Rtf => Self { bins: 128, batch_size: 8, ..base },
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.batch_size == 0 {
            return Err(AttackError::Config("batch size must be positive"));
        }
        match self.kind {
            AttackKind::Dlg | AttackKind::Inverting if self.batch_size != 1 => {
                Err(AttackError::Config("passive attacks observe a single image"))
            }
            AttackKind::Inverting if !(self.step_size > 0.0) || !(self.tv_weight >= 0.0) => {
                Err(AttackError::Config("Inverting needs a positive step size and non-negative TV weight"))
            }
            AttackKind::Cah if self.trap_rows == 0 => Err(AttackError::Config("CAH needs trap rows")),
            AttackKind::Rtf if self.bins == 0 => Err(AttackError::Config("RTF needs at least one bin")),
            _ => Ok(()),
        }
    }
}

/// Gradient as reconstructed by the server from consecutive plaintext
/// parameters. Hidden coordinates carry no value.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedGradient {
    pub values: Vec<Option<f64>>,
    pub round: RoundData,
    /// DP noise multiplier in effect for the observed step (0 when off).
    pub sigma: f64,
}

impl ObservedGradient {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn fully_hidden(&self) -> bool {
        self.visible_count() == 0
    }

    /// Same inference from what an attacker actually receives.
    pub fn from_view(w_prev: &[f64], view: &AttackerView, lr: f64, sigma: f64) -> Result<Self, AttackError> {
        if lr == 0.0 {
            return Err(AttackError::ZeroLearningRate);
        }
        if w_prev.len() != view.values.len() {
            return Err(AttackError::LengthMismatch { expected: w_prev.len(), actual: view.values.len() });
        }
        let values = w_prev.iter().zip(&view.values).map(|(p, n)| n.map(|n| (p - n) / lr)).collect();
        Ok(Self { values, round: RoundData::Authentic, sigma })
    }
}

/// `(w_prev − w_next)/lr` where the mask is clear, hidden elsewhere.
pub fn infer_gradient(w_prev: &[f64], w_next: &[f64], lr: f64, mask: &EncryptionMask) -> Result<ObservedGradient, AttackError> {
    if lr == 0.0 {
        return Err(AttackError::ZeroLearningRate);
    }
    for len in [w_next.len(), mask.len()] {
        if len != w_prev.len() {
            return Err(AttackError::LengthMismatch { expected: w_prev.len(), actual: len });
        }
    }
    let values = w_prev
        .iter()
        .zip(w_next)
        .enumerate()
        .map(|(i, (p, n))| if mask.is_hidden(i) { None } else { Some((p - n) / lr) })
        .collect();
    Ok(ObservedGradient { values, round: RoundData::Authentic, sigma: 0.0 })
}

/// Output of a reconstruction attack before scoring.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reconstruction {
    pub images: Vec<Vec<f64>>,
    /// First-layer row each image was read from (active attacks).
    pub rows: Vec<usize>,
    /// Final matching loss for optimization attacks.
    pub loss: Option<f64>,
    /// Set when the attack had nothing to work with or diverged.
    pub failed: bool,
}

impl Reconstruction {
    pub fn failed() -> Self {
        Self { images: Vec::new(), rows: Vec::new(), loss: None, failed: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AttackOutcome {
    pub reconstructions: Vec<Vec<f64>>,
    /// One flag per target.
    pub matched: Vec<bool>,
    pub success: f64,
    pub seed: u64,
    pub failed: bool,
    pub loss: Option<f64>,
}

/// Authentic images the attacker's reconstructions are matched against.
/// Exact duplicates are removed so nearest-neighbour identity is unambiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    images: Dataset,
}

impl CandidatePool {
    /// First `size` distinct images of `ds`.
    pub fn from_dataset(ds: &Dataset, size: usize) -> Result<Self, AttackError> {
        let mut keep: Vec<usize> = Vec::new();
        for i in 0..ds.len() {
            if keep.len() >= size {
                break;
            }
            if !keep.iter().any(|&j| ds.sample(j) == ds.sample(i)) {
                keep.push(i);
            }
        }
        if keep.is_empty() {
            return Err(AttackError::EmptyPool);
        }
        let images = ds.subset(&keep).map_err(|_| AttackError::EmptyPool)?;
        Ok(Self { images })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.images.feature_len()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.sample(i)
    }

    /// Per-pixel mean over the pool.
    pub fn mean_image(&self) -> Vec<f64> {
        let d = self.feature_len();
        let mut m = alloc::vec![0.0; d];
        for i in 0..self.len() {
            for (a, v) in m.iter_mut().zip(self.image(i)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.len() as f64);
        m
    }

    /// Index of the Euclidean nearest neighbour; ties go to the lower index.
    pub fn nearest(&self, x: &[f64]) -> Result<usize, AttackError> {
        if x.len() != self.feature_len() {
            return Err(AttackError::LengthMismatch { expected: self.feature_len(), actual: x.len() });
        }
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.len() {
            let d: f64 = self.image(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        Ok(best.1)
    }
}

/// Fraction of reconstructions whose nearest pool image is their own target.
/// `targets[i]` is the pool index behind `reconstructions[i]`.
pub fn iip_score(reconstructions: &[Vec<f64>], pool: &CandidatePool, targets: &[usize]) -> Result<f64, AttackError> {
    if pool.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    if reconstructions.len() != targets.len() {
        return Err(AttackError::LengthMismatch { expected: targets.len(), actual: reconstructions.len() });
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (r, &t) in reconstructions.iter().zip(targets) {
        if t >= pool.len() {
            return Err(AttackError::TargetOutOfPool(t));
        }
        if pool.nearest(r)? == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / targets.len() as f64)
}

/// Matching for attacks that emit many reconstructions, each drawn from a
/// set of source samples (`sources[i]` holds positions into `targets`).
/// Target `t` is identified when a reconstruction sourced from it has `t`
/// as its nearest pool image.
pub fn identified_targets(reconstructions: &[Vec<f64>], sources: &[Vec<usize>], pool: &CandidatePool, targets: &[usize]) -> Result<Vec<bool>, AttackError> {
    if pool.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    if reconstructions.len() != sources.len() {
        return Err(AttackError::LengthMismatch { expected: reconstructions.len(), actual: sources.len() });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= pool.len()) {
        return Err(AttackError::TargetOutOfPool(t));
    }
    let mut hit = alloc::vec![false; targets.len()];
    for (r, src) in reconstructions.iter().zip(sources) {
        let nn = pool.nearest(r)?;
        for &i in src {
            if targets.get(i) == Some(&nn) {
                hit[i] = true;
            }
        }
    }
    Ok(hit)
}

#[cfg(test)]
mod tests;
