//! Experiment configuration: a JSON document with defaults for every field,
//! and dotted-path overrides.

use std::path::{Path, PathBuf};

use altfl_core::attack::{AttackConfig, AttackKind};
use altfl_core::data::DEFAULT_VARIANCE_FLOOR;
use altfl_core::fl::LocalTraining;
use altfl_core::levels::{std_name, PrivacyLevel, DEFAULT_ETAS, DEFAULT_SIGMAS, NEAR_ZERO, STD_SIGMAS};
use altfl_core::selection::ThresholdSet;
use altfl_core::{HeCostModel, InterleaveRatio, Method, ModelArch, ProtectionConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read spec {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid spec: {0}")]
    Json(#[from] serde_json::Error),
    #[error("override `{0}` must look like key.path=value")]
    OverrideSyntax(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    /// Compute time is the modeled crypto time only; archives are reproducible.
    #[default]
    Modeled,
    /// Adds measured wall-clock training time.
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// AFLD training corpus; the bundled digits when absent.
    pub train: Option<PathBuf>,
    /// Pre-generated synthetic AFLD set; fitted from the training split when absent.
    pub synthetic: Option<PathBuf>,
    pub test_size: usize,
    pub split_seed: u64,
    pub variance_floor: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: None, synthetic: None, test_size: 360, split_seed: 0, variance_floor: DEFAULT_VARIANCE_FLOOR }
    }
}

/// Which configurations to train. Level-based entries are expanded through
/// each method's parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtectionGrid {
    pub explicit: Vec<ProtectionConfig>,
    pub levels: Vec<String>,
    pub methods: Vec<Method>,
    pub mp_etas: Vec<f64>,
    pub ratios: Vec<InterleaveRatio>,
    /// Also run PI at ρ = 1.
    pub pi_full_ratio: bool,
}

impl Default for ProtectionGrid {
    fn default() -> Self {
        Self {
            explicit: Vec::new(),
            levels: vec!["Supremum".into()],
            methods: vec![Method::Pi, Method::SiDp, Method::SiHe, Method::Mp],
            mp_etas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            ratios: InterleaveRatio::grid().to_vec(),
            pi_full_ratio: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub attacks: Vec<AttackKind>,
    pub sigmas: Vec<f64>,
    pub etas: Vec<f64>,
    /// Trials per matrix cell.
    pub trials: usize,
    /// Trials per training configuration for its ASR; 0 skips ASR.
    pub record_trials: usize,
    pub pool_size: usize,
    pub warmup: usize,
    pub lr: f64,
    pub seed: u64,
    pub threshold: f64,
    /// Replaces the default settings of the listed attacks.
    pub overrides: Vec<AttackConfig>,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            attacks: AttackKind::ALL.to_vec(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
            etas: DEFAULT_ETAS.to_vec(),
            trials: 50,
            record_trials: 20,
            pool_size: 1000,
            warmup: 256,
            lr: 0.1,
            seed: 0,
            threshold: NEAR_ZERO,
            overrides: Vec::new(),
        }
    }
}

impl AttackSettings {
    pub fn config(&self, kind: AttackKind) -> AttackConfig {
        self.overrides.iter().find(|c| c.kind == kind).cloned().unwrap_or_else(|| AttackConfig::new(kind))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub rq2: ThresholdSet,
    pub rq3: ThresholdSet,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { rq2: ThresholdSet::RQ2, rq3: ThresholdSet::RQ3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Archive subdirectory.
    pub name: String,
    pub data: DataConfig,
    pub arch: ModelArch,
    pub clients: usize,
    pub alphas: Vec<f64>,
    pub aug_ratios: Vec<f64>,
    pub protection: ProtectionGrid,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub local: LocalTraining,
    pub warmup_batch: usize,
    pub stop_at_convergence: bool,
    pub cost: HeCostModel,
    pub attack: AttackSettings,
    pub thresholds: Thresholds,
    pub clock: ClockKind,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            data: DataConfig::default(),
            arch: ModelArch::desk_default(),
            clients: 3,
            alphas: vec![0.25, 0.5, 1.0],
            aug_ratios: vec![0.0, 0.25],
            protection: ProtectionGrid::default(),
            seeds: (1..=10).collect(),
            rounds: 60,
            local: LocalTraining::default(),
            warmup_batch: 32,
            stop_at_convergence: false,
            cost: HeCostModel::default(),
            attack: AttackSettings::default(),
            thresholds: Thresholds::default(),
            clock: ClockKind::Modeled,
            workers: None,
        }
    }
}

/// Whether `name` denotes a level this tool can produce.
pub fn is_known_level(name: &str) -> bool {
    matches!(name, "Infimum" | "Supremum") || AttackKind::from_name(name).is_some() || parse_std(name).is_some()
}

/// σ of a `Std-…` level name.
pub fn parse_std(name: &str) -> Option<f64> {
    let s: f64 = name.strip_prefix("Std-")?.parse().ok()?;
    (s.is_finite() && s > 0.0 && std_name(s) == name).then_some(s)
}

/// The standard levels, for use when no matrices have been measured.
pub fn standard_levels(etas: &[f64]) -> Vec<PrivacyLevel> {
    STD_SIGMAS.iter().map(|&s| PrivacyLevel::standard(s, etas)).collect()
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), SpecError> {
    let mut cur = root;
    for part in path.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| SpecError::UnknownField(path.to_string()))?;
    }
    *cur = value;
    Ok(())
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON, and
    /// fall back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self, SpecError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut v = serde_json::to_value(&self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| SpecError::OverrideSyntax(o.to_string()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key.trim(), value)?;
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError::Invalid(m.to_string()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name");
        }
        if self.clients == 0 || self.rounds == 0 {
            return bad("clients and rounds must be positive");
        }
        if self.alphas.is_empty() || self.aug_ratios.is_empty() || self.seeds.is_empty() {
            return bad("alphas, aug_ratios and seeds must be non-empty");
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("alphas must be positive");
        }
        if self.aug_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("aug_ratios must lie in [0, 1)");
        }
        let p = &self.protection;
        if p.explicit.is_empty() && (p.levels.is_empty() || p.methods.is_empty()) {
            return bad("protection grid is empty");
        }
        if p.methods.contains(&Method::Mp) && p.mp_etas.is_empty() {
            return bad("mp_etas must be non-empty when MP is listed");
        }
        if p.methods.iter().any(Method::interleaves) && p.ratios.is_empty() {
            return bad("ratios must be non-empty for interleaving methods");
        }
        if let Some(l) = p.levels.iter().find(|l| !is_known_level(l)) {
            return Err(SpecError::Invalid(format!("unknown level `{l}`")));
        }
        for c in &p.explicit {
            c.validate().map_err(|e| SpecError::Invalid(e.to_string()))?;
        }
        let a = &self.attack;
        if a.attacks.is_empty() || a.sigmas.is_empty() || a.etas.is_empty() || a.trials == 0 || a.pool_size == 0 {
            return bad("attack grids, trials and pool size must be non-empty");
        }
        if !a.sigmas.windows(2).all(|w| w[0] < w[1]) || !a.etas.windows(2).all(|w| w[0] < w[1]) {
            return bad("attack grids must be strictly ascending");
        }
        if !a.sigmas.contains(&0.0) || !a.etas.contains(&0.0) {
            return bad("attack grids must include 0");
        }
        for t in [self.thresholds.rq2, self.thresholds.rq3] {
            if !t.is_valid() {
                return bad("thresholds must be non-negative");
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        Ok(())
    }
}
