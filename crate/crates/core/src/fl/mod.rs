//! FedAvg round loop with per-method protection schedules.

mod convergence;
mod engine;
mod schedule;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub use convergence::{detect_convergence, ConvergenceDetector};
pub use engine::{
    build_round_mask, prepare_clients, run_training, Clock, ClientData, FrozenClock, LocalTraining, RoundLog, TrainingOutcome,
    TrainingSpec,
};
pub use schedule::{round_flag, InterleaveRatio, RatioError};

use crate::data::DataError;
use crate::dp::DpError;
use crate::he::HeError;
use crate::model::{ModelError, ParameterVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("training diverged in round {round}: {source}")]
    Diverged { round: usize, source: ModelError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Method {
    #[cfg_attr(feature = "serde", serde(rename = "MP"))]
    Mp,
    #[cfg_attr(feature = "serde", serde(rename = "PI"))]
    Pi,
    #[cfg_attr(feature = "serde", serde(rename = "SI/DP"))]
    SiDp,
    #[cfg_attr(feature = "serde", serde(rename = "SI/HE"))]
    SiHe,
    #[cfg_attr(feature = "serde", serde(rename = "DP-only"))]
    DpOnly,
    #[cfg_attr(feature = "serde", serde(rename = "HE-only"))]
    HeOnly,
    /// No protection; reference runs only.
    #[cfg_attr(feature = "serde", serde(rename = "plain"))]
    Plain,
}

impl Method {
    pub const ALL: [Method; 7] = [Method::Mp, Method::Pi, Method::SiDp, Method::SiHe, Method::DpOnly, Method::HeOnly, Method::Plain];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Mp => "MP",
            Method::Pi => "PI",
            Method::SiDp => "SI/DP",
            Method::SiHe => "SI/HE",
            Method::DpOnly => "DP-only",
            Method::HeOnly => "HE-only",
            Method::Plain => "plain",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn interleaves(&self) -> bool {
        matches!(self, Method::Pi | Method::SiDp | Method::SiHe)
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which data a round trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RoundData {
    Authentic,
    Synthetic,
}

/// Protections active in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RoundPlan {
    pub data: RoundData,
    pub dp: bool,
    pub he: bool,
}

/// Privacy parameters of one run. σ = 0 disables DP-SGD entirely and η = 0
/// disables encryption, so degenerate settings collapse onto the simpler
/// methods.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ProtectionConfig {
    pub method: Method,
    pub sigma: f64,
    pub clip_norm: f64,
    pub eta: f64,
    pub ratio: InterleaveRatio,
    #[cfg_attr(feature = "serde", serde(default))]
    pub level: Option<String>,
}

impl ProtectionConfig {
    pub fn new(method: Method, sigma: f64, eta: f64, ratio: InterleaveRatio) -> Self {
        Self { method, sigma, clip_norm: crate::DEFAULT_CLIP_NORM, eta, ratio, level: None }
    }

    pub fn plain() -> Self {
        Self::new(Method::Plain, 0.0, 0.0, InterleaveRatio::ZERO)
    }

    pub fn dp_only(sigma: f64) -> Self {
        Self::new(Method::DpOnly, sigma, 0.0, InterleaveRatio::ZERO)
    }

    pub fn he_only(eta: f64) -> Self {
        Self::new(Method::HeOnly, 0.0, eta, InterleaveRatio::ZERO)
    }

    pub fn with_level(mut self, level: &str) -> Self {
        self.level = Some(level.into());
        self
    }

    pub fn validate(&self) -> Result<(), FlError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(FlError::Config("sigma must be finite and non-negative"));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(FlError::Config("clip norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(FlError::Config("eta must lie in [0, 1]"));
        }
        if self.ratio.is_one() && matches!(self.method, Method::SiDp | Method::SiHe) {
            return Err(FlError::Config("ratio 1 is only valid for PI"));
        }
        Ok(())
    }

    /// The settings that actually shape training: fields a method ignores
    /// are zeroed so equivalent configurations compare equal.
    pub fn effective(&self) -> (f64, f64, InterleaveRatio) {
        match self.method {
            Method::Mp => (self.sigma, self.eta, InterleaveRatio::ZERO),
            Method::Pi => (self.sigma, self.eta, self.ratio),
            Method::SiDp => (self.sigma, 0.0, self.ratio),
            Method::SiHe => (0.0, self.eta, self.ratio),
            Method::DpOnly => (self.sigma, 0.0, InterleaveRatio::ZERO),
            Method::HeOnly => (0.0, self.eta, InterleaveRatio::ZERO),
            Method::Plain => (0.0, 0.0, InterleaveRatio::ZERO),
        }
    }

    /// Round type for 1-indexed round `t`.
    pub fn plan(&self, t: u64) -> RoundPlan {
        let (sigma, eta, ratio) = self.effective();
        let dp = sigma > 0.0;
        let he = eta > 0.0;
        let auth = |dp, he| RoundPlan { data: RoundData::Authentic, dp, he };
        let synthetic = RoundPlan { data: RoundData::Synthetic, dp: false, he: false };
        let flag = round_flag(t, ratio);
        match self.method {
            Method::Mp => auth(dp, he),
            Method::DpOnly => auth(dp, false),
            Method::HeOnly => auth(false, he),
            Method::Plain => auth(false, false),
            Method::SiDp => if flag { auth(dp, false) } else { synthetic },
            Method::SiHe => if flag { auth(false, he) } else { synthetic },
            Method::Pi => if flag { auth(false, he) } else { auth(dp, false) },
        }
    }

    /// Whether any round of the schedule encrypts.
    pub fn uses_he(&self) -> bool {
        let (_, eta, ratio) = self.effective();
        eta > 0.0 && (0..ratio.tot() as u64).any(|t| self.plan(t + 1).he)
    }

    pub fn uses_synthetic(&self) -> bool {
        let (_, _, ratio) = self.effective();
        (1..=ratio.tot() as u64).any(|t| self.plan(t).data == RoundData::Synthetic)
    }

    /// Moving-average window: 8 for interleaving methods at ρ ∈ {1/4, 3/4}.
    pub fn detector(&self) -> ConvergenceDetector {
        let quarter = self.ratio == InterleaveRatio::new(1, 4).unwrap() || self.ratio == InterleaveRatio::new(3, 4).unwrap();
        ConvergenceDetector::new(if self.method.interleaves() && quarter { 8 } else { 10 })
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RunRecord {
    pub config: ProtectionConfig,
    pub seed: u64,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    /// Detected round, or the number of rounds run when no plateau was seen.
    pub convergence_round: usize,
    pub converged: bool,
    pub rounds_run: usize,
    /// Uplink plus downlink bytes, averaged over clients.
    pub comm_bytes_per_client: f64,
    /// Wall-clock training time plus modeled crypto time.
    pub compute_secs: f64,
    pub crypto_secs: f64,
    pub wall_secs: f64,
    /// Largest cumulative ε over clients; `None` when no DP step ran.
    pub epsilon: Option<f64>,
    pub accuracy_history: Vec<f64>,
}

/// `|d_i| / |D|` for each client.
pub fn fedavg_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

/// Weighted average `Σ (|d_i|/|D|) w_i`, reduced left to right.
pub fn fedavg_aggregate(models: &[ParameterVector], sizes: &[usize]) -> Result<ParameterVector, FlError> {
    let first = models.first().ok_or(FlError::Config("no models to aggregate"))?;
    if sizes.len() != models.len() || sizes.contains(&0) {
        return Err(FlError::Config("sizes must be positive, one per model"));
    }
    let weights = fedavg_weights(sizes);
    let mut acc = vec![0.0; first.len()];
    for (m, &w) in models.iter().zip(&weights) {
        if m.len() != first.len() {
            return Err(ModelError::ShapeMismatch { expected: first.len(), actual: m.len() }.into());
        }
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += w * v;
        }
    }
    Ok(first.with_values(acc)?)
}

/// Mean after dropping the single best and worst value (when at least three
/// values are present).
pub fn trimmed_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let core = if v.len() >= 3 { &v[1..v.len() - 1] } else { &v[..] };
    Some(core.iter().sum::<f64>() / core.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, LayerSpec, ModelArch, Shape};
    use alloc::vec;

    fn scalar(v: f64) -> ParameterVector {
        let arch = ModelArch {
            input: Shape::new(1, 1, 1),
            layers: vec![LayerSpec::Dense { inputs: 1, outputs: 1, activation: Activation::Identity }],
            classes: 1,
        };
        init_model(&arch, 0).unwrap().with_values(vec![v, 0.0]).unwrap()
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg_aggregate(&[scalar(0.0), scalar(4.0)], &[5, 5]).unwrap().values()[0], 2.0);
        assert_eq!(fedavg_aggregate(&[scalar(0.0), scalar(4.0)], &[1, 3]).unwrap().values()[0], 3.0);
        assert_eq!(fedavg_aggregate(&[scalar(1.25)], &[7]).unwrap(), scalar(1.25));
        assert!(fedavg_aggregate(&[scalar(1.0)], &[0]).is_err());
    }

    #[test]
    fn fedavg_of_identical_models_is_exact() {
        let p = init_model(&ModelArch::desk_default(), 3).unwrap();
        for sizes in [[1usize, 1, 1], [3, 7, 11], [1, 2, 3]] {
            let out = fedavg_aggregate(&[p.clone(), p.clone(), p.clone()], &sizes).unwrap();
            let diff = out.values().iter().zip(p.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // w(1/6 + 2/6 + 3/6) can differ from w by an ulp.
            assert!(diff <= 4.0 * f64::EPSILON, "{diff}");
        }
        let out = fedavg_aggregate(&[p.clone(), p.clone()], &[5, 5]).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn plans_follow_the_schedules() {
        let r = |a, b| InterleaveRatio::new(a, b).unwrap();
        let pi = ProtectionConfig::new(Method::Pi, 0.1, 1.0, r(1, 2));
        assert_eq!(pi.plan(1), RoundPlan { data: RoundData::Authentic, dp: true, he: false });
        assert_eq!(pi.plan(2), RoundPlan { data: RoundData::Authentic, dp: false, he: true });
        assert_eq!(pi.plan(3), RoundPlan { data: RoundData::Authentic, dp: true, he: false });
        let sidp = ProtectionConfig::new(Method::SiDp, 0.1, 0.0, r(1, 4));
        assert_eq!(sidp.plan(3).data, RoundData::Synthetic);
        assert!(sidp.plan(1).dp);
        let mp = ProtectionConfig::new(Method::Mp, 0.1, 0.2, r(1, 2));
        assert!((1..10).all(|t| mp.plan(t) == RoundPlan { data: RoundData::Authentic, dp: true, he: true }));
        assert!(ProtectionConfig::new(Method::SiHe, 0.0, 0.5, InterleaveRatio::ONE).validate().is_err());
        assert!(ProtectionConfig::new(Method::Pi, 0.1, 0.5, InterleaveRatio::ONE).validate().is_ok());
    }

    #[test]
    fn reduced_plans_coincide() {
        let r = |a, b| InterleaveRatio::new(a, b).unwrap();
        let (s, e) = (0.3, 0.4);
        let pairs = [
            (ProtectionConfig::new(Method::SiDp, s, e, InterleaveRatio::ZERO), ProtectionConfig::dp_only(s)),
            (ProtectionConfig::new(Method::Pi, s, e, InterleaveRatio::ONE), ProtectionConfig::dp_only(s)),
            (ProtectionConfig::new(Method::Pi, s, e, InterleaveRatio::ZERO), ProtectionConfig::he_only(e)),
            (ProtectionConfig::new(Method::SiHe, s, e, InterleaveRatio::ZERO), ProtectionConfig::he_only(e)),
            (ProtectionConfig::new(Method::Mp, s, 0.0, r(1, 2)), ProtectionConfig::dp_only(s)),
            (ProtectionConfig::new(Method::Mp, 0.0, e, r(1, 2)), ProtectionConfig::he_only(e)),
        ];
        for (a, b) in pairs {
            assert!((1..40).all(|t| a.plan(t) == b.plan(t)), "{:?} vs {:?}", a.method, b.method);
            assert_eq!(a.uses_he(), b.uses_he());
        }
    }

    #[test]
    fn detector_window_rule() {
        let r = |a, b| InterleaveRatio::new(a, b).unwrap();
        assert_eq!(ProtectionConfig::new(Method::Pi, 0.1, 1.0, r(1, 4)).detector().window, 8);
        assert_eq!(ProtectionConfig::new(Method::SiHe, 0.0, 1.0, r(3, 4)).detector().window, 8);
        assert_eq!(ProtectionConfig::new(Method::SiDp, 0.1, 0.0, r(1, 2)).detector().window, 10);
        assert_eq!(ProtectionConfig::new(Method::Mp, 0.1, 0.2, r(1, 4)).detector().window, 10);
        assert_eq!(ProtectionConfig::dp_only(0.1).detector().window, 10);
    }

    #[test]
    fn trimmed_mean_drops_extremes() {
        assert_eq!(trimmed_mean(&[1.0, 100.0, 2.0, 3.0, -50.0]), Some(2.0));
        assert_eq!(trimmed_mean(&[1.0, 3.0]), Some(2.0));
        assert_eq!(trimmed_mean(&[]), None);
    }
}
