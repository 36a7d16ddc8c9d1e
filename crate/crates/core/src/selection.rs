//! Threshold-based method selection over measured configurations.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::fl::{Method, ProtectionConfig};

/// Absorbs rounding in threshold sums such as `0.56 − 0.04`.
pub const SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ThresholdSet {
    pub t_asr: f64,
    pub t_acc: f64,
    pub t_sc: f64,
}

impl ThresholdSet {
    pub const RQ2: Self = Self { t_asr: 0.01, t_acc: 0.04, t_sc: 0.5 };
    pub const RQ3: Self = Self { t_asr: 0.005, t_acc: 0.1, t_sc: 0.5 };

    pub fn is_valid(&self) -> bool {
        [self.t_asr, self.t_acc, self.t_sc].iter().all(|t| *t >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    Asr,
    Acc,
    Sc,
}

pub const RQ2_ORDER: [Stage; 3] = [Stage::Asr, Stage::Acc, Stage::Sc];
pub const RQ3_ORDER: [Stage; 3] = [Stage::Acc, Stage::Asr, Stage::Sc];

/// One measured configuration: protection, its group keys and its metrics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Candidate {
    pub config: ProtectionConfig,
    /// Privacy level name.
    pub level: String,
    /// Data-distribution key (α or augmentation ratio).
    pub group: String,
    pub asr: f64,
    pub accuracy: f64,
    pub comm_bytes: f64,
    pub compute_secs: f64,
    pub convergence_round: f64,
}

fn min_of(c: &[Candidate], f: impl Fn(&Candidate) -> f64) -> f64 {
    c.iter().map(f).fold(f64::INFINITY, f64::min)
}

fn keep(c: &[Candidate], pred: impl Fn(&Candidate) -> bool) -> Vec<Candidate> {
    c.iter().filter(|x| pred(x)).cloned().collect()
}

/// Records within `t_asr` of the lowest success rate.
pub fn filter_asr(group: &[Candidate], t_asr: f64) -> Vec<Candidate> {
    let bound = min_of(group, |c| c.asr) + t_asr + SLACK;
    keep(group, |c| c.asr <= bound)
}

/// Records within `t_acc` of the best accuracy.
pub fn filter_acc(group: &[Candidate], t_acc: f64) -> Vec<Candidate> {
    let best = group.iter().map(|c| c.accuracy).fold(f64::NEG_INFINITY, f64::max);
    keep(group, |c| c.accuracy >= best - t_acc - SLACK)
}

fn filter_cost(group: &[Candidate], t_sc: f64, f: impl Fn(&Candidate) -> f64 + Copy) -> Vec<Candidate> {
    let bound = (1.0 + t_sc) * min_of(group, f);
    keep(group, |c| f(c) <= bound * (1.0 + SLACK))
}

/// Communication, then computation, then convergence rounds, each within a
/// factor `1 + t_sc` of the current minimum.
pub fn filter_sc(group: &[Candidate], t_sc: f64) -> Vec<Candidate> {
    let a = filter_cost(group, t_sc, |c| c.comm_bytes);
    let b = filter_cost(&a, t_sc, |c| c.compute_secs);
    filter_cost(&b, t_sc, |c| c.convergence_round)
}

/// Survivors after each stage, in order.
pub fn pipeline(group: &[Candidate], th: &ThresholdSet, order: &[Stage]) -> Vec<Vec<Candidate>> {
    let mut cur = group.to_vec();
    let mut out = Vec::with_capacity(order.len());
    for stage in order {
        cur = match stage {
            Stage::Asr => filter_asr(&cur, th.t_asr),
            Stage::Acc => filter_acc(&cur, th.t_acc),
            Stage::Sc => filter_sc(&cur, th.t_sc),
        };
        out.push(cur.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub level: String,
    pub group: String,
    pub candidates: Vec<Candidate>,
    pub stages: Vec<Vec<Candidate>>,
    pub rendered: String,
}

impl SelectionRow {
    pub fn survivors(&self) -> &[Candidate] {
        self.stages.last().map_or(&[], Vec::as_slice)
    }
}

/// Runs the pipeline for every `(level, group)` pair.
pub fn select(records: &[Candidate], th: &ThresholdSet, order: &[Stage], levels: &[String], groups: &[String]) -> Vec<SelectionRow> {
    let mut rows = Vec::with_capacity(levels.len() * groups.len());
    for level in levels {
        for group in groups {
            let candidates: Vec<Candidate> = records.iter().filter(|r| &r.level == level && &r.group == group).cloned().collect();
            let (stages, rendered) = if candidates.is_empty() {
                (Vec::new(), "no candidate".to_string())
            } else {
                let stages = pipeline(&candidates, th, order);
                let text = render_cell(&candidates, stages.last().map_or(&[], Vec::as_slice));
                (stages, text)
            };
            rows.push(SelectionRow { level: level.clone(), group: group.clone(), candidates, stages, rendered });
        }
    }
    rows
}

/// Baseline a configuration reduces to, if any.
pub fn equivalent_baseline(cfg: &ProtectionConfig) -> Option<Method> {
    let (sigma, eta, ratio) = cfg.effective();
    let dp_only = match cfg.method {
        Method::SiDp => ratio.is_zero(),
        Method::Pi => ratio.is_one(),
        Method::Mp => eta == 0.0,
        _ => false,
    };
    let he_only = match cfg.method {
        Method::SiHe => ratio.is_zero(),
        Method::Pi => ratio.is_zero(),
        Method::Mp => sigma == 0.0,
        _ => false,
    };
    if dp_only && sigma > 0.0 {
        Some(Method::DpOnly)
    } else if he_only && eta > 0.0 {
        Some(Method::HeOnly)
    } else {
        None
    }
}

const DISPLAY_ORDER: [Method; 7] = [Method::SiDp, Method::SiHe, Method::Pi, Method::Mp, Method::DpOnly, Method::HeOnly, Method::Plain];

fn param_label(cfg: &ProtectionConfig) -> Option<(&'static str, String)> {
    match cfg.method {
        Method::Pi | Method::SiDp | Method::SiHe => Some(("ρ", format!("{}", cfg.ratio))),
        Method::Mp => Some(("η", format!("{}", cfg.eta))),
        _ => None,
    }
}

fn value_list(name: &str, vals: &BTreeSet<(u64, String)>) -> String {
    let v: Vec<&str> = vals.iter().map(|(_, s)| s.as_str()).collect();
    if v.len() == 1 {
        format!("{name}={}", v[0])
    } else {
        format!("{name}∈{{{}}}", v.join(", "))
    }
}

fn sort_key(cfg: &ProtectionConfig) -> u64 {
    let v = match cfg.method {
        Method::Mp => cfg.eta,
        _ => cfg.ratio.value(),
    };
    (v * 1e9) as u64
}

/// Renders survivors in table style: a bare method name when all its
/// configurations survive, `M (excl. …)` when fewer fail than survive,
/// `M: …` otherwise; configurations equivalent to the single-technique
/// baselines are also listed under `DP (…)` and `HE (…)`.
pub fn render_cell(candidates: &[Candidate], survivors: &[Candidate]) -> String {
    let mut parts = Vec::new();
    let mut dp_eq = Vec::new();
    let mut he_eq = Vec::new();
    for m in DISPLAY_ORDER {
        let all: Vec<&Candidate> = candidates.iter().filter(|c| c.config.method == m).collect();
        if all.is_empty() {
            continue;
        }
        let ok: Vec<&Candidate> = survivors.iter().filter(|c| c.config.method == m).collect();
        if ok.is_empty() {
            continue;
        }
        for c in &ok {
            match equivalent_baseline(&c.config) {
                Some(Method::DpOnly) if !dp_eq.contains(&m.name()) => dp_eq.push(m.name()),
                Some(Method::HeOnly) if !he_eq.contains(&m.name()) => he_eq.push(m.name()),
                _ => {}
            }
        }
        let all_survive = all.iter().all(|c| ok.iter().any(|o| o.config == c.config));
        if all_survive {
            parts.push(m.name().to_string());
            continue;
        }
        let own = |c: &&&Candidate| equivalent_baseline(&c.config).is_none();
        let labelled = |set: &[&Candidate], filter_eq: bool| -> Option<(&'static str, BTreeSet<(u64, String)>)> {
            let mut name = None;
            let mut vals = BTreeSet::new();
            for c in set.iter().filter(|c| !filter_eq || own(c)) {
                let (n, v) = param_label(&c.config)?;
                name = Some(n);
                vals.insert((sort_key(&c.config), v));
            }
            name.map(|n| (n, vals))
        };
        let failed: Vec<&Candidate> = all.iter().copied().filter(|c| !ok.iter().any(|o| o.config == c.config)).collect();
        let Some((name, kept)) = labelled(&ok, true) else { continue };
        match labelled(&failed, false) {
            Some((_, lost)) if lost.len() < kept.len() => parts.push(format!("{} (excl. {})", m.name(), value_list(name, &lost))),
            _ => parts.push(format!("{}: {}", m.name(), value_list(name, &kept))),
        }
    }
    if !dp_eq.is_empty() {
        parts.push(format!("DP ({})", dp_eq.join(", ")));
    }
    if !he_eq.is_empty() {
        parts.push(format!("HE ({})", he_eq.join(", ")));
    }
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join(", ")
    }
}

/// Plain-text grid with levels down and groups across.
pub fn render_table(rows: &[SelectionRow], levels: &[String], groups: &[String]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::with_capacity(levels.len() + 1);
    let mut header = alloc::vec![String::new()];
    header.extend(groups.iter().cloned());
    cells.push(header);
    for level in levels {
        let mut line = alloc::vec![level.clone()];
        for g in groups {
            let r = rows.iter().find(|r| &r.level == level && &r.group == g);
            line.push(r.map_or_else(|| "no candidate".to_string(), |r| r.rendered.clone()));
        }
        cells.push(line);
    }
    let ncol = groups.len() + 1;
    let widths: Vec<usize> = (0..ncol).map(|j| cells.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, r) in cells.iter().enumerate() {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PrivacyRequirement {
    /// Supremum or a standard level.
    Strong,
    /// Levels below Supremum.
    Moderate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Priority {
    Accuracy,
    LowCommunication,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recommendation {
    pub methods: Vec<Method>,
    pub caveat: Option<&'static str>,
}

/// Objective-oriented choice among the methods.
pub fn recommend(req: PrivacyRequirement, priority: Priority) -> Recommendation {
    use alloc::vec;
    match (req, priority) {
        (PrivacyRequirement::Strong, Priority::Accuracy) => Recommendation { methods: vec![Method::Pi], caveat: None },
        (PrivacyRequirement::Strong, Priority::LowCommunication) => Recommendation { methods: vec![Method::SiDp, Method::DpOnly], caveat: None },
        (PrivacyRequirement::Moderate, Priority::LowCommunication) => Recommendation {
            methods: vec![Method::SiDp, Method::DpOnly],
            caveat: Some("only the DLG level is reliably met without encryption; choose the noise multiplier accordingly"),
        },
        (PrivacyRequirement::Moderate, Priority::Accuracy) => Recommendation { methods: vec![Method::Mp, Method::SiHe], caveat: None },
    }
}

#[cfg(test)]
mod tests;
