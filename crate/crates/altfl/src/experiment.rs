//! Sweep orchestration: configuration expansion, parallel execution with a
//! single archive writer, and the matrix → levels → training → selection
//! stages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::mpsc;
use std::time::Instant;

use altfl_core::attack::{run_trial, trial_seed, trial_settings, AttackConfig, AttackEnv, AttackError, AttackKind, CandidatePool, TrialSetting};
use altfl_core::data::train_test_split;
use altfl_core::fl::{prepare_clients, run_training, Clock, FrozenClock, TrainingSpec};
use altfl_core::levels::{derive_levels, level_config, PrivacyLevel, SuccessMatrix};
use altfl_core::selection::{select, Candidate, SelectionRow, Stage, ThresholdSet, RQ2_ORDER, RQ3_ORDER};
use altfl_core::fl::trimmed_mean;
use altfl_core::{Dataset, InterleaveRatio, Method, ProtectionConfig, SimulatorBackend};
use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::afld;
use crate::archive::{run_key, Appender, Archive, CellRow, Failure, RecordRow};
use crate::spec::{parse_std, ClockKind, ExperimentSpec};

/// Seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Train/test split, optional external synthetic set, and the attack pool.
pub struct Workspace {
    pub train: Dataset,
    pub test: Dataset,
    pub synthetic: Option<Dataset>,
    pub pool: CandidatePool,
    pub backend: SimulatorBackend,
}

impl Workspace {
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        let full = match &spec.data.train {
            Some(p) => afld::read(p).with_context(|| format!("reading {}", p.display()))?,
            None => afld::bundled_digits(),
        };
        let synthetic = match &spec.data.synthetic {
            Some(p) => Some(afld::read(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let (train, test) = train_test_split(&full, spec.data.test_size, spec.data.split_seed)?;
        let pool = CandidatePool::from_dataset(&train, spec.attack.pool_size.min(train.len()))?;
        Ok(Self { train, test, synthetic, pool, backend: SimulatorBackend::new(spec.cost) })
    }

    pub fn attack_env<'a>(&'a self, spec: &'a ExperimentSpec, clip_norm: f64) -> AttackEnv<'a> {
        AttackEnv { pool: &self.pool, arch: &spec.arch, lr: spec.attack.lr, clip_norm, warmup: spec.attack.warmup, backend: &self.backend }
    }
}

/// Counts of one sweep stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub total: usize,
    pub skipped: usize,
    pub ran: usize,
    pub failures: Vec<Failure>,
}

/// Runs `f` over `items` on a pool of `workers` threads and hands results to
/// `sink` on the calling thread as they complete.
pub fn run_parallel<T, R, F, S>(workers: Option<usize>, items: &[T], f: F, mut sink: S) -> Result<()>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
    S: FnMut(usize, R) -> Result<()>,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.unwrap_or(0)).build()?;
    let (tx, rx) = mpsc::channel();
    let mut first_err = None;
    std::thread::scope(|s| {
        let f = &f;
        s.spawn(move || {
            pool.install(|| {
                items.par_iter().enumerate().for_each_with(tx, |tx, (i, item)| {
                    let _ = tx.send((i, f(item)));
                })
            })
        });
        for (i, r) in rx {
            if let Err(e) = sink(i, r) {
                first_err.get_or_insert(e);
            }
        }
    });
    first_err.map_or(Ok(()), Err)
}

/// Success rate over `trials` trials run in parallel; equal to the
/// sequential rate bit for bit.
pub fn success_rate_par(env: &AttackEnv<'_>, cfg: &AttackConfig, prot: &ProtectionConfig, trials: usize, seed: u64) -> Result<f64, AttackError> {
    if trials == 0 {
        return Err(AttackError::Config("at least one trial is required"));
    }
    rates_sum(env, cfg, &trial_settings(prot, trials), seed)
}

fn rates_sum(env: &AttackEnv<'_>, cfg: &AttackConfig, settings: &[TrialSetting], seed: u64) -> Result<f64, AttackError> {
    let per: Vec<f64> = settings
        .par_iter()
        .enumerate()
        .map(|(k, s)| run_trial(env, cfg, *s, trial_seed(seed, k)).map(|o| o.success))
        .collect::<Result<_, _>>()?;
    Ok(per.iter().sum::<f64>() / settings.len() as f64)
}

/// A matrix cell computed with parallel trials; equal to the sequential cell.
pub fn matrix_cell_par(env: &AttackEnv<'_>, cfg: &AttackConfig, sigma: f64, eta: f64, trials: usize, seed: u64) -> Result<f64, AttackError> {
    rates_sum(env, cfg, &vec![TrialSetting { sigma, eta }; trials], seed)
}

/// Matrix cells for every configured attack, skipping cells already stored
/// with the same trial count and seed.
pub fn run_matrices(spec: &ExperimentSpec, ws: &Workspace, archive: &Archive) -> Result<StageSummary> {
    let a = &spec.attack;
    let env = ws.attack_env(spec, altfl_core::DEFAULT_CLIP_NORM);
    let mut summary = StageSummary::default();
    let mut done: HashMap<AttackKind, Vec<CellRow>> = HashMap::new();
    let mut todo = Vec::new();
    for &kind in &a.attacks {
        let stored = archive.read_cells(kind)?;
        let have: HashSet<(u64, u64)> = stored.iter().filter(|c| c.trials == a.trials && c.seed == a.seed).map(|c| (c.sigma.to_bits(), c.eta.to_bits())).collect();
        for &s in &a.sigmas {
            for &e in &a.etas {
                summary.total += 1;
                if have.contains(&(s.to_bits(), e.to_bits())) {
                    summary.skipped += 1;
                } else {
                    todo.push((kind, s, e));
                }
            }
        }
        done.insert(kind, stored);
    }
    let mut appenders = HashMap::new();
    for &kind in &a.attacks {
        appenders.insert(kind, Appender::open(&archive.matrix_path(kind))?);
    }
    run_parallel(
        spec.workers,
        &todo,
        |&(kind, s, e)| matrix_cell_par(&env, &a.config(kind), s, e, a.trials, a.seed),
        |i, r| {
            let (kind, sigma, eta) = todo[i];
            match r {
                Ok(rate) => {
                    let row = CellRow { sigma, eta, rate, trials: a.trials, seed: a.seed };
                    appenders.get_mut(&kind).expect("opened above").push(&row)?;
                    done.get_mut(&kind).expect("inserted above").push(row);
                    summary.ran += 1;
                }
                Err(err) => summary.failures.push(Failure { key: format!("{kind}|s={sigma}|e={eta}"), stage: "matrix".into(), error: err.to_string() }),
            }
            Ok(())
        },
    )?;
    drop(appenders);
    for &kind in &a.attacks {
        let cells = &done[&kind];
        let mut ordered = Vec::with_capacity(a.sigmas.len() * a.etas.len());
        for &s in &a.sigmas {
            for &e in &a.etas {
                if let Some(c) = cells.iter().rev().find(|c| c.sigma == s && c.eta == e && c.trials == a.trials && c.seed == a.seed) {
                    ordered.push(c.clone());
                }
            }
        }
        crate::archive::write_rows(&archive.matrix_path(kind), &ordered)?;
    }
    Ok(summary)
}

pub fn read_matrices(spec: &ExperimentSpec, archive: &Archive) -> Result<Vec<SuccessMatrix>> {
    let a = &spec.attack;
    AttackKind::ALL.iter().map(|&k| archive.read_matrix(k, &a.sigmas, &a.etas, a.trials, a.seed)).collect()
}

/// Derives every level from the stored matrices and writes `levels.json`.
pub fn run_levels(spec: &ExperimentSpec, archive: &Archive) -> Result<Vec<PrivacyLevel>> {
    let levels = derive_levels(&read_matrices(spec, archive)?, spec.attack.threshold)?;
    archive.write_json(&archive.levels_path(), &levels)?;
    Ok(levels)
}

/// Resolves a level by name: standard levels are built on demand, the rest
/// come from `derived`.
pub fn find_level(name: &str, derived: Option<&[PrivacyLevel]>, etas: &[f64]) -> Result<PrivacyLevel> {
    if let Some(l) = derived.and_then(|d| d.iter().find(|l| l.name == name)) {
        return Ok(l.clone());
    }
    if let Some(s) = parse_std(name) {
        return Ok(PrivacyLevel::standard(s, etas));
    }
    Err(anyhow!("level `{name}` is not available; run `levels` first"))
}

/// Explicit configurations followed by each level × method × parameter
/// combination the level can instantiate.
pub fn expand_configs(spec: &ExperimentSpec, derived: Option<&[PrivacyLevel]>) -> Result<Vec<ProtectionConfig>> {
    let p = &spec.protection;
    let mut out: Vec<ProtectionConfig> = p.explicit.clone();
    for name in &p.levels {
        let level = find_level(name, derived, &spec.attack.etas)?;
        for &m in &p.methods {
            let params: Vec<(f64, InterleaveRatio)> = match m {
                Method::Mp => p.mp_etas.iter().map(|&e| (e, InterleaveRatio::ZERO)).collect(),
                Method::Pi => {
                    let mut r: Vec<_> = p.ratios.iter().map(|&r| (0.0, r)).collect();
                    if p.pi_full_ratio && !p.ratios.contains(&InterleaveRatio::ONE) {
                        r.push((0.0, InterleaveRatio::ONE));
                    }
                    r
                }
                Method::SiDp | Method::SiHe => p.ratios.iter().filter(|r| !r.is_one()).map(|&r| (0.0, r)).collect(),
                _ => vec![(0.0, InterleaveRatio::ZERO)],
            };
            out.extend(params.into_iter().filter_map(|(e, r)| level_config(&level, m, e, r)));
        }
    }
    let mut seen = HashSet::new();
    out.retain(|c| seen.insert(run_key(c, 0.0, 0.0, 0)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTask {
    pub config: ProtectionConfig,
    pub alpha: f64,
    pub aug_ratio: f64,
    pub seed: u64,
    pub key: String,
}

pub fn train_tasks(spec: &ExperimentSpec, configs: &[ProtectionConfig]) -> Vec<TrainTask> {
    let mut v = Vec::new();
    for c in configs {
        for &alpha in &spec.alphas {
            for &aug_ratio in &spec.aug_ratios {
                for &seed in &spec.seeds {
                    v.push(TrainTask { config: c.clone(), alpha, aug_ratio, seed, key: run_key(c, alpha, aug_ratio, seed) });
                }
            }
        }
    }
    v
}

/// Attacks that bear on a configuration's level: the named attack for an
/// attack-specific level, all configured attacks otherwise.
pub fn asr_attacks(spec: &ExperimentSpec, cfg: &ProtectionConfig) -> Vec<AttackKind> {
    match cfg.level.as_deref().and_then(AttackKind::from_name) {
        Some(k) => vec![k],
        None => spec.attack.attacks.clone(),
    }
}

/// Highest success rate of the relevant attacks against `cfg`.
pub fn config_asr(spec: &ExperimentSpec, ws: &Workspace, cfg: &ProtectionConfig) -> Result<f64, AttackError> {
    let env = ws.attack_env(spec, cfg.clip_norm);
    let mut worst: f64 = 0.0;
    for k in asr_attacks(spec, cfg) {
        worst = worst.max(success_rate_par(&env, &spec.attack.config(k), cfg, spec.attack.record_trials, spec.attack.seed)?);
    }
    Ok(worst)
}

pub fn train_one(spec: &ExperimentSpec, ws: &Workspace, task: &TrainTask, asr: Option<f64>) -> Result<RecordRow> {
    let clients = prepare_clients(&ws.train, spec.clients, task.alpha, task.aug_ratio, ws.synthetic.as_ref(), task.seed, spec.data.variance_floor)?;
    let ts = TrainingSpec {
        arch: spec.arch.clone(),
        protection: task.config.clone(),
        rounds: spec.rounds,
        local: spec.local,
        seed: task.seed,
        cost: spec.cost,
        warmup_batch: spec.warmup_batch,
        stop_at_convergence: spec.stop_at_convergence,
    };
    let out = match spec.clock {
        ClockKind::Modeled => run_training(&ts, &clients, &ws.test, &ws.backend, &FrozenClock)?,
        ClockKind::Wall => run_training(&ts, &clients, &ws.test, &ws.backend, &SystemClock::default())?,
    };
    Ok(RecordRow::from_record(&out.record, task.alpha, task.aug_ratio, asr))
}

/// Trains every pending task, appending each record as it completes, then
/// rewrites `records.csv` in task order.
pub fn run_training_sweep(spec: &ExperimentSpec, ws: &Workspace, archive: &Archive) -> Result<StageSummary> {
    let derived = archive.read_levels()?;
    let configs = expand_configs(spec, derived.as_deref())?;
    let tasks = train_tasks(spec, &configs);
    let mut stored: BTreeMap<String, RecordRow> = archive.read_records()?.into_iter().map(|r| (r.key.clone(), r)).collect();
    let pending: Vec<&TrainTask> = tasks.iter().filter(|t| !stored.contains_key(&t.key)).collect();
    let mut summary = StageSummary { total: tasks.len(), skipped: tasks.len() - pending.len(), ..Default::default() };

    let mut asr: HashMap<String, Result<f64, String>> = HashMap::new();
    if spec.attack.record_trials > 0 {
        let mut uniq: Vec<ProtectionConfig> = Vec::new();
        for t in &pending {
            if !uniq.contains(&t.config) {
                uniq.push(t.config.clone());
            }
        }
        let rates: Vec<Result<f64, String>> = uniq.par_iter().map(|c| config_asr(spec, ws, c).map_err(|e| e.to_string())).collect();
        for (c, r) in uniq.iter().zip(rates) {
            asr.insert(run_key(c, 0.0, 0.0, 0), r);
        }
    }

    let mut app = Appender::open(&archive.records_path())?;
    run_parallel(
        spec.workers,
        &pending,
        |t| {
            let rate = match asr.get(&run_key(&t.config, 0.0, 0.0, 0)) {
                Some(Ok(r)) => Some(*r),
                Some(Err(e)) => return Err(anyhow!("attack: {e}")),
                None => None,
            };
            train_one(spec, ws, t, rate)
        },
        |i, r| {
            match r {
                Ok(row) => {
                    app.push(&row)?;
                    stored.insert(row.key.clone(), row);
                    summary.ran += 1;
                }
                Err(e) => summary.failures.push(Failure { key: pending[i].key.clone(), stage: "train".into(), error: format!("{e:#}") }),
            }
            Ok(())
        },
    )?;
    drop(app);

    let mut ordered: Vec<RecordRow> = tasks.iter().filter_map(|t| stored.remove(&t.key)).collect();
    ordered.extend(stored.into_values());
    crate::archive::write_rows(&archive.records_path(), &ordered)?;
    Ok(summary)
}

/// Level names in presentation order: standard levels by decreasing σ,
/// Supremum, the attack levels, Infimum, then anything else by name.
pub fn level_order(names: &[String]) -> Vec<String> {
    let rank = |n: &str| -> (u8, i64, String) {
        if let Some(s) = parse_std(n) {
            (0, -(s * 1e9) as i64, String::new())
        } else if n == "Supremum" {
            (1, 0, String::new())
        } else if let Some(k) = AttackKind::from_name(n) {
            (2, AttackKind::ALL.iter().position(|x| *x == k).unwrap_or(0) as i64, String::new())
        } else if n == "Infimum" {
            (3, 0, String::new())
        } else {
            (4, 0, n.to_string())
        }
    };
    let mut v: Vec<String> = names.to_vec();
    v.sort_by_key(|n| rank(n));
    v.dedup();
    v
}

/// Collapses seeds: accuracy, costs and rounds use the trimmed mean, the
/// success rate the plain mean. Rows without a success rate are left out.
pub fn candidates(records: &[RecordRow]) -> Vec<Candidate> {
    let mut groups: BTreeMap<(String, String), Vec<&RecordRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records.iter().filter(|r| r.asr.is_some()) {
        let k = (run_key(&r.config(), r.alpha, r.aug_ratio, 0), r.group());
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let rows = &groups[&k];
            let tm = |f: fn(&RecordRow) -> f64| trimmed_mean(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            let asr = rows.iter().filter_map(|r| r.asr).sum::<f64>() / rows.len() as f64;
            Candidate {
                config: rows[0].config(),
                level: rows[0].level.clone(),
                group: k.1.clone(),
                asr,
                accuracy: tm(|r| r.best_accuracy),
                comm_bytes: tm(|r| r.comm_bytes_per_client),
                compute_secs: tm(|r| r.compute_secs),
                convergence_round: tm(|r| r.convergence_round as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionCell {
    pub level: String,
    pub group: String,
    pub candidates: usize,
    pub stage_counts: Vec<usize>,
    pub survivors: Vec<String>,
    pub rendered: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionResult {
    pub rq: String,
    pub thresholds: ThresholdSet,
    pub order: Vec<Stage>,
    pub cells: Vec<SelectionCell>,
    #[serde(skip)]
    pub table: String,
}

/// Identifier of a candidate within its cell.
pub fn candidate_id(c: &Candidate) -> String {
    run_key(&c.config, 0.0, 0.0, 0).split("|a=").next().unwrap_or_default().to_string()
}

pub fn run_selection_on(records: &[RecordRow], rq: &str, th: &ThresholdSet) -> Result<SelectionResult> {
    let order: &[Stage] = match rq {
        "rq2" => &RQ2_ORDER,
        "rq3" => &RQ3_ORDER,
        _ => bail!("unknown research question `{rq}`; use rq2 or rq3"),
    };
    let cands = candidates(records);
    if cands.is_empty() {
        bail!("no records with an attack success rate; train with attack.record_trials > 0");
    }
    let levels = level_order(&cands.iter().map(|c| c.level.clone()).collect::<Vec<_>>());
    let mut groups: Vec<String> = cands.iter().map(|c| c.group.clone()).collect();
    groups.sort();
    groups.dedup();
    let rows: Vec<SelectionRow> = select(&cands, th, order, &levels, &groups);
    let table = altfl_core::selection::render_table(&rows, &levels, &groups);
    let cells = rows
        .iter()
        .map(|r| SelectionCell {
            level: r.level.clone(),
            group: r.group.clone(),
            candidates: r.candidates.len(),
            stage_counts: r.stages.iter().map(Vec::len).collect(),
            survivors: r.survivors().iter().map(candidate_id).collect(),
            rendered: r.rendered.clone(),
        })
        .collect();
    Ok(SelectionResult { rq: rq.to_string(), thresholds: *th, order: order.to_vec(), cells, table })
}

/// Writes `selection/<rq>.txt` and `selection/<rq>.json` for both questions.
pub fn run_selection(spec: &ExperimentSpec, archive: &Archive, records: &[RecordRow]) -> Result<Vec<SelectionResult>> {
    let mut out = Vec::new();
    for (rq, th) in [("rq2", spec.thresholds.rq2), ("rq3", spec.thresholds.rq3)] {
        let res = run_selection_on(records, rq, &th)?;
        let header = format!(
            "{} thresholds: t_asr={} t_acc={} t_sc={}; order {:?}\n\n",
            rq.to_uppercase(),
            th.t_asr,
            th.t_acc,
            th.t_sc,
            res.order
        );
        archive.write_text(&archive.selection_path(rq), &(header + &res.table))?;
        archive.write_json(&archive.selection_path(rq).with_extension("json"), &res)?;
        out.push(res);
    }
    Ok(out)
}
