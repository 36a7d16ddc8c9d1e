//! Results archive: one directory per experiment holding `records.csv`,
//! `matrices/<attack>.csv`, `levels.json`, `selection/<rq>.txt` and, after a
//! partial failure, `failures.json`. Column schemas are in `docs/FORMATS.md`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use altfl_core::attack::AttackKind;
use altfl_core::levels::{PrivacyLevel, SuccessMatrix};
use altfl_core::{InterleaveRatio, Method, ProtectionConfig, RunRecord};
use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Version of the CSV column schemas.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the archive root.
pub const ARCHIVE_ENV: &str = "ALTFL_ARCHIVE";

/// One training run, flattened. Every row carries the parameters needed to
/// rerun it alone; the remaining settings are in the archived `spec.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub key: String,
    pub level: String,
    pub method: Method,
    pub sigma: f64,
    pub clip_norm: f64,
    pub eta: f64,
    pub ratio: InterleaveRatio,
    pub alpha: f64,
    pub aug_ratio: f64,
    pub seed: u64,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub convergence_round: usize,
    pub converged: bool,
    pub rounds_run: usize,
    pub comm_bytes_per_client: f64,
    pub compute_secs: f64,
    pub crypto_secs: f64,
    pub wall_secs: f64,
    pub epsilon: Option<f64>,
    pub asr: Option<f64>,
}

/// Stable identifier of a training task.
pub fn run_key(cfg: &ProtectionConfig, alpha: f64, aug_ratio: f64, seed: u64) -> String {
    format!(
        "{}|{}|s={}|c={}|e={}|r={}|a={}|aug={}|seed={}",
        cfg.level.as_deref().unwrap_or("-"),
        cfg.method,
        cfg.sigma,
        cfg.clip_norm,
        cfg.eta,
        cfg.ratio,
        alpha,
        aug_ratio,
        seed
    )
}

impl RecordRow {
    pub fn from_record(rec: &RunRecord, alpha: f64, aug_ratio: f64, asr: Option<f64>) -> Self {
        let c = &rec.config;
        Self {
            key: run_key(c, alpha, aug_ratio, rec.seed),
            level: c.level.clone().unwrap_or_else(|| "-".into()),
            method: c.method,
            sigma: c.sigma,
            clip_norm: c.clip_norm,
            eta: c.eta,
            ratio: c.ratio,
            alpha,
            aug_ratio,
            seed: rec.seed,
            best_accuracy: rec.best_accuracy,
            final_accuracy: rec.final_accuracy,
            convergence_round: rec.convergence_round,
            converged: rec.converged,
            rounds_run: rec.rounds_run,
            comm_bytes_per_client: rec.comm_bytes_per_client,
            compute_secs: rec.compute_secs,
            crypto_secs: rec.crypto_secs,
            wall_secs: rec.wall_secs,
            epsilon: rec.epsilon,
            asr,
        }
    }

    pub fn config(&self) -> ProtectionConfig {
        let mut c = ProtectionConfig::new(self.method, self.sigma, self.eta, self.ratio);
        c.clip_norm = self.clip_norm;
        if self.level != "-" {
            c.level = Some(self.level.clone());
        }
        c
    }

    /// Selection group: the data-distribution setting.
    pub fn group(&self) -> String {
        format!("alpha={},r={}", self.alpha, self.aug_ratio)
    }
}

/// One success-matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub sigma: f64,
    pub eta: f64,
    pub rate: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub key: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureManifest {
    pub schema_version: u32,
    pub failures: Vec<Failure>,
}

/// Reads rows of a headed CSV, skipping rows that do not parse (for
/// example a line cut short by an interrupted run).
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for row in rd.deserialize() {
        match row {
            Ok(r) => out.push(r),
            Err(e) => eprintln!("warning: skipping unreadable row in {}: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Writes all rows to `path` through a temporary file.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Appends rows as they complete so an interrupted sweep can resume.
pub struct Appender {
    inner: csv::Writer<File>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Self { inner: csv::WriterBuilder::new().has_headers(fresh).from_writer(file) })
    }

    pub fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Layout of one experiment directory.
#[derive(Debug, Clone)]
pub struct Archive {
    pub dir: PathBuf,
}

impl Archive {
    pub fn new(root: &Path, name: &str) -> Self {
        Self { dir: root.join(name) }
    }

    pub fn create(&self) -> Result<()> {
        for sub in ["", "matrices", "selection"] {
            fs::create_dir_all(self.dir.join(sub)).with_context(|| format!("creating {}", self.dir.join(sub).display()))?;
        }
        Ok(())
    }

    pub fn spec_path(&self) -> PathBuf {
        self.dir.join("spec.json")
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join("records.csv")
    }

    pub fn matrix_path(&self, kind: AttackKind) -> PathBuf {
        self.dir.join("matrices").join(format!("{}.csv", kind.name().to_lowercase()))
    }

    pub fn levels_path(&self) -> PathBuf {
        self.dir.join("levels.json")
    }

    pub fn selection_path(&self, rq: &str) -> PathBuf {
        self.dir.join("selection").join(format!("{rq}.txt"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("report.md")
    }

    pub fn failures_path(&self) -> PathBuf {
        self.dir.join("failures.json")
    }

    pub fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(text.as_bytes())?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(path, &text)
    }

    pub fn read_records(&self) -> Result<Vec<RecordRow>> {
        read_rows(&self.records_path())
    }

    pub fn read_levels(&self) -> Result<Option<Vec<PrivacyLevel>>> {
        let p = self.levels_path();
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p)?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
    }

    pub fn read_cells(&self, kind: AttackKind) -> Result<Vec<CellRow>> {
        read_rows(&self.matrix_path(kind))
    }

    /// Assembles the matrix for `kind` on the given grid from stored cells
    /// measured with `trials` trials and `seed`.
    pub fn read_matrix(&self, kind: AttackKind, sigmas: &[f64], etas: &[f64], trials: usize, seed: u64) -> Result<SuccessMatrix> {
        let cells: BTreeMap<(u64, u64), f64> = self
            .read_cells(kind)?
            .into_iter()
            .filter(|c| c.trials == trials && c.seed == seed)
            .map(|c| ((c.sigma.to_bits(), c.eta.to_bits()), c.rate))
            .collect();
        let mut rates = Vec::with_capacity(sigmas.len());
        for &s in sigmas {
            let row = etas
                .iter()
                .map(|&e| cells.get(&(s.to_bits(), e.to_bits())).copied().ok_or_else(|| anyhow!("{kind} matrix is missing cell (σ={s}, η={e}); run `matrix` first")))
                .collect::<Result<Vec<_>>>()?;
            rates.push(row);
        }
        Ok(SuccessMatrix::new(kind, sigmas.to_vec(), etas.to_vec(), rates, trials)?)
    }

    /// Writes the manifest when there are failures and removes a stale one
    /// otherwise.
    pub fn write_failures(&self, failures: &[Failure]) -> Result<()> {
        let p = self.failures_path();
        if failures.is_empty() {
            if p.exists() {
                fs::remove_file(&p)?;
            }
            return Ok(());
        }
        self.write_json(&p, &FailureManifest { schema_version: SCHEMA_VERSION, failures: failures.to_vec() })
    }
}
