//! Privacy levels extracted from attack-success matrices.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{run_trial, trial_seed, AttackConfig, AttackEnv, AttackError, AttackKind, TrialSetting};
use crate::fl::{InterleaveRatio, Method, ProtectionConfig};

/// Rates strictly below this count as a failed attack.
pub const NEAR_ZERO: f64 = 0.005;

pub const DEFAULT_SIGMAS: [f64; 12] = [0.0, 0.00005, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_ETAS: [f64; 8] = [0.0, 0.05, 0.2, 0.4, 0.6, 0.7, 0.8, 1.0];
/// Noise multipliers of the standard levels, strongest first.
pub const STD_SIGMAS: [f64; 5] = [1.0, 0.75, 0.5, 0.25, 0.1];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LevelError {
    #[error("grids must be non-empty and strictly ascending")]
    BadGrid,
    #[error("rates must be in [0, 1] with one row per sigma and one column per eta")]
    BadRates,
    #[error("eta {0} is not in the matrix grid")]
    EtaNotInGrid(f64),
    #[error("matrix for {0} is missing")]
    MissingAttack(AttackKind),
    #[error("attack matrices use different eta grids")]
    GridMismatch,
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Success rates with σ along rows and η along columns.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SuccessMatrix {
    pub attack: AttackKind,
    pub sigmas: Vec<f64>,
    pub etas: Vec<f64>,
    /// `rates[i][j]` is the rate at `(sigmas[i], etas[j])`.
    pub rates: Vec<Vec<f64>>,
    pub trials: usize,
}

fn ascending(g: &[f64]) -> bool {
    !g.is_empty() && g.iter().all(|v| v.is_finite()) && g.windows(2).all(|w| w[0] < w[1])
}

impl SuccessMatrix {
    pub fn new(attack: AttackKind, sigmas: Vec<f64>, etas: Vec<f64>, rates: Vec<Vec<f64>>, trials: usize) -> Result<Self, LevelError> {
        if !ascending(&sigmas) || !ascending(&etas) {
            return Err(LevelError::BadGrid);
        }
        if rates.len() != sigmas.len() || rates.iter().any(|r| r.len() != etas.len() || r.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(LevelError::BadRates);
        }
        Ok(Self { attack, sigmas, etas, rates, trials })
    }

    pub fn rate(&self, sigma_idx: usize, eta_idx: usize) -> f64 {
        self.rates[sigma_idx][eta_idx]
    }

    fn eta_index(&self, eta: f64) -> Result<usize, LevelError> {
        self.etas.iter().position(|&e| e == eta).ok_or(LevelError::EtaNotInGrid(eta))
    }
}

/// Fills every cell with `cell(σ, η)`.
pub fn build_matrix_with<F>(attack: AttackKind, sigmas: &[f64], etas: &[f64], trials: usize, mut cell: F) -> Result<SuccessMatrix, LevelError>
where
    F: FnMut(f64, f64) -> Result<f64, LevelError>,
{
    if trials == 0 {
        return Err(LevelError::Attack(AttackError::Config("at least one trial is required")));
    }
    let mut rates = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        rates.push(etas.iter().map(|&e| cell(s, e)).collect::<Result<Vec<_>, _>>()?);
    }
    SuccessMatrix::new(attack, sigmas.to_vec(), etas.to_vec(), rates, trials)
}

/// Mean success over `trials` trials with DP and HE both active. Every cell
/// reuses the same trial seeds, so cells differ only in protection.
pub fn matrix_cell(env: &AttackEnv<'_>, cfg: &AttackConfig, sigma: f64, eta: f64, trials: usize, seed: u64) -> Result<f64, LevelError> {
    let mut total = 0.0;
    for k in 0..trials {
        total += run_trial(env, cfg, TrialSetting { sigma, eta }, trial_seed(seed, k))?.success;
    }
    Ok(total / trials as f64)
}

/// Sequential matrix over the grids.
pub fn build_matrix(env: &AttackEnv<'_>, cfg: &AttackConfig, sigmas: &[f64], etas: &[f64], trials: usize, seed: u64) -> Result<SuccessMatrix, LevelError> {
    build_matrix_with(cfg.kind, sigmas, etas, trials, |s, e| matrix_cell(env, cfg, s, e, trials, seed))
}

/// Smallest σ in column `eta` with a rate below `threshold`.
pub fn extract_mp_sigma(m: &SuccessMatrix, eta: f64, threshold: f64) -> Result<Option<f64>, LevelError> {
    let j = m.eta_index(eta)?;
    Ok(m.sigmas.iter().enumerate().find(|&(i, _)| m.rate(i, j) < threshold).map(|(_, &s)| s))
}

/// Scan of the η = 0 column.
pub fn extract_dp_sigma(m: &SuccessMatrix, threshold: f64) -> Result<Option<f64>, LevelError> {
    extract_mp_sigma(m, 0.0, threshold)
}

/// Smallest η in the σ = 0 row with a rate below `threshold`.
pub fn extract_he_eta(m: &SuccessMatrix, threshold: f64) -> Result<Option<f64>, LevelError> {
    let i = m.sigmas.iter().position(|&s| s == 0.0).ok_or(LevelError::BadGrid)?;
    Ok(m.etas.iter().enumerate().find(|&(j, _)| m.rate(i, j) < threshold).map(|(_, &e)| e))
}

/// A named assignment η → σ. `None` marks an η at which the level cannot be
/// met on the measured grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PrivacyLevel {
    pub name: String,
    pub etas: Vec<f64>,
    pub sigmas: Vec<Option<f64>>,
    /// Encryption ratio used by HE-bearing methods at this level.
    pub he_eta: Option<f64>,
}

impl PrivacyLevel {
    pub fn sigma_at(&self, eta: f64) -> Option<f64> {
        self.etas.iter().position(|&e| e == eta).and_then(|j| self.sigmas[j])
    }

    /// Smallest η at which no noise is needed.
    pub fn min_eta(&self) -> Option<f64> {
        self.etas.iter().zip(&self.sigmas).find(|(_, s)| **s == Some(0.0)).map(|(&e, _)| e)
    }

    pub fn is_standard(&self) -> bool {
        self.name.starts_with("Std-")
    }

    /// Constant-σ level used with full encryption by HE-bearing methods.
    pub fn standard(sigma: f64, etas: &[f64]) -> Self {
        Self { name: std_name(sigma), etas: etas.to_vec(), sigmas: vec![Some(sigma); etas.len()], he_eta: Some(1.0) }
    }
}

pub fn std_name(sigma: f64) -> String {
    let s = format!("{sigma}");
    if s.contains('.') {
        format!("Std-{s}")
    } else {
        format!("Std-{s}.0")
    }
}

/// Attack-specific level: σ from each column's scan, and zero from the
/// HE-only ratio onward.
pub fn attack_level(m: &SuccessMatrix, threshold: f64) -> Result<PrivacyLevel, LevelError> {
    let he = extract_he_eta(m, threshold)?;
    let sigmas = m
        .etas
        .iter()
        .map(|&e| if he.is_some_and(|h| e >= h) { Ok(Some(0.0)) } else { extract_mp_sigma(m, e, threshold) })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PrivacyLevel { name: m.attack.name().to_string(), etas: m.etas.clone(), sigmas, he_eta: he })
}

/// Column-wise minimum and maximum of attack-specific levels. The Infimum is
/// unattainable only where every input is; the Supremum wherever any is.
pub fn bound_levels(levels: &[PrivacyLevel]) -> Result<(PrivacyLevel, PrivacyLevel), LevelError> {
    let first = levels.first().ok_or(LevelError::GridMismatch)?;
    if levels.iter().any(|l| l.etas != first.etas) {
        return Err(LevelError::GridMismatch);
    }
    let n = first.etas.len();
    let mut inf = Vec::with_capacity(n);
    let mut sup = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<Option<f64>> = levels.iter().map(|l| l.sigmas[j]).collect();
        let present = col.iter().flatten().copied();
        inf.push(present.clone().reduce(f64::min));
        sup.push(if col.iter().all(Option::is_some) { present.reduce(f64::max) } else { None });
    }
    let make = |name: &str, sigmas: Vec<Option<f64>>| {
        let mut l = PrivacyLevel { name: name.to_string(), etas: first.etas.clone(), sigmas, he_eta: None };
        l.he_eta = l.min_eta();
        l
    };
    Ok((make("Infimum", inf), make("Supremum", sup)))
}

/// Every level, standard levels first, then Supremum, the four attack
/// levels, and Infimum.
pub fn derive_levels(matrices: &[SuccessMatrix], threshold: f64) -> Result<Vec<PrivacyLevel>, LevelError> {
    let mut attack_levels = Vec::with_capacity(4);
    for kind in AttackKind::ALL {
        let m = matrices.iter().find(|m| m.attack == kind).ok_or(LevelError::MissingAttack(kind))?;
        attack_levels.push(attack_level(m, threshold)?);
    }
    let (inf, sup) = bound_levels(&attack_levels)?;
    let etas = attack_levels[0].etas.clone();
    let mut out: Vec<PrivacyLevel> = STD_SIGMAS.iter().map(|&s| PrivacyLevel::standard(s, &etas)).collect();
    out.push(sup);
    out.extend(attack_levels);
    out.push(inf);
    Ok(out)
}

/// Protection parameters a method uses at `level`. MP keeps its own η and
/// takes σ from that column; other DP methods use the η = 0 column; HE
/// methods use the level's HE ratio. `None` when the level is unattainable
/// for this method.
pub fn level_config(level: &PrivacyLevel, method: Method, mp_eta: f64, ratio: InterleaveRatio) -> Option<ProtectionConfig> {
    let dp_sigma = || level.sigma_at(0.0);
    let he_eta = || level.he_eta;
    let cfg = match method {
        Method::Mp => ProtectionConfig::new(Method::Mp, level.sigma_at(mp_eta)?, mp_eta, InterleaveRatio::ZERO),
        Method::Pi => ProtectionConfig::new(Method::Pi, dp_sigma()?, he_eta()?, ratio),
        Method::SiDp => ProtectionConfig::new(Method::SiDp, dp_sigma()?, 0.0, ratio),
        Method::SiHe if level.is_standard() => return None,
        Method::SiHe => ProtectionConfig::new(Method::SiHe, 0.0, he_eta()?, ratio),
        Method::DpOnly => ProtectionConfig::dp_only(dp_sigma()?),
        Method::HeOnly => ProtectionConfig::he_only(he_eta()?),
        Method::Plain => ProtectionConfig::plain(),
    };
    Some(cfg.with_level(&level.name))
}
