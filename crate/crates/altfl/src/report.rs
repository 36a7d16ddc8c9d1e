//! Markdown summary of an archive.

use std::fmt::Write;
use std::time::Instant;

use altfl_core::he::{he_aggregate, protect, unprotect, EncryptionMask};
use altfl_core::levels::PrivacyLevel;
use altfl_core::{HeCostModel, SimulatorBackend};
use serde::Serialize;

use crate::archive::RecordRow;
use crate::experiment::{candidates, level_order};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x}"))
}

fn params(c: &altfl_core::ProtectionConfig) -> String {
    format!("σ={} η={} ρ={}", c.sigma, c.eta, c.ratio)
}

pub fn levels_table(levels: &[PrivacyLevel]) -> String {
    let mut out = String::new();
    let Some(first) = levels.first() else { return out };
    let head: Vec<String> = first.etas.iter().map(|e| format!("η={e}")).collect();
    let _ = writeln!(out, "| level | {} | HE η |", head.join(" | "));
    let _ = writeln!(out, "|---|{}---|", "---|".repeat(head.len()));
    for l in levels {
        let cells: Vec<String> = l.sigmas.iter().map(|s| opt(*s)).collect();
        let _ = writeln!(out, "| {} | {} | {} |", l.name, cells.join(" | "), opt(l.he_eta));
    }
    out
}

/// Per-configuration summary (seed-collapsed) followed by the levels.
pub fn render(records: &[RecordRow], levels: Option<&[PrivacyLevel]>) -> String {
    let mut out = String::from("# Experiment report\n\n");
    let _ = writeln!(out, "{} training records.\n", records.len());
    let mut all = records.to_vec();
    for r in all.iter_mut().filter(|r| r.asr.is_none()) {
        r.asr = Some(f64::NAN);
    }
    let cands = candidates(&all);
    let mut groups: Vec<String> = cands.iter().map(|c| c.group.clone()).collect();
    groups.sort();
    groups.dedup();
    let order = level_order(&cands.iter().map(|c| c.level.clone()).collect::<Vec<_>>());
    for g in &groups {
        let _ = writeln!(out, "## {g}\n");
        out.push_str("| level | method | parameters | accuracy | ASR | comm (MB/client) | compute (s) | convergence round |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for lvl in &order {
            for c in cands.iter().filter(|c| &c.group == g && &c.level == lvl) {
                let asr = if c.asr.is_nan() { "n/a".to_string() } else { format!("{:.3}", c.asr) };
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {:.4} | {} | {:.3} | {:.3} | {:.1} |",
                    c.level,
                    c.config.method,
                    params(&c.config),
                    c.accuracy,
                    asr,
                    c.comm_bytes / 1e6,
                    c.compute_secs,
                    c.convergence_round
                );
            }
        }
        out.push('\n');
    }
    if let Some(l) = levels {
        out.push_str("## Privacy levels (σ per η)\n\n");
        out.push_str(&levels_table(l));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub coords: usize,
    pub repeats: usize,
    pub seal_secs_per_coord: f64,
    pub open_secs_per_coord: f64,
    pub aggregate_secs_per_coord: f64,
    pub message_bytes: u64,
    pub configured: HeCostModel,
}

/// Times the simulator backend's protect / aggregate / unprotect path on a
/// fully encrypted vector of `coords` coordinates.
pub fn bench_he(cost: HeCostModel, coords: usize, repeats: usize) -> anyhow::Result<BenchResult> {
    let backend = SimulatorBackend::new(cost);
    let v: Vec<f64> = (0..coords).map(|i| (i as f64).sin()).collect();
    let mask = EncryptionMask::all(coords);
    let reps = repeats.max(1);
    let (mut seal, mut open, mut agg) = (0.0, 0.0, 0.0);
    let mut bytes = 0;
    for _ in 0..reps {
        let t = Instant::now();
        let p = protect(&v, &mask, &backend)?;
        seal += t.elapsed().as_secs_f64();
        let pair = [p.clone(), p.clone()];
        let t = Instant::now();
        let s = he_aggregate(&pair, &[0.5, 0.5], &backend)?;
        agg += t.elapsed().as_secs_f64();
        bytes = p.bytes();
        let t = Instant::now();
        let _ = unprotect(&p, &mask, &backend)?;
        open += t.elapsed().as_secs_f64();
        drop(s);
    }
    let per = |x: f64| x / (reps * coords.max(1)) as f64;
    Ok(BenchResult {
        coords,
        repeats: reps,
        seal_secs_per_coord: per(seal),
        open_secs_per_coord: per(open),
        aggregate_secs_per_coord: per(agg),
        message_bytes: bytes,
        configured: cost,
    })
}
