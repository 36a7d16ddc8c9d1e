use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::{detect_convergence, fedavg_aggregate, fedavg_weights, FlError, ProtectionConfig, RoundData, RoundPlan, RunRecord};
use crate::accountant::rdp_epsilon;
use crate::data::{dirichlet_partition, iid_split, mix_augment, surrogate_synthetic, AugmentationSpec, Dataset, PartitionSpec};
use crate::dp::{dp_sgd_step, DpParams};
use crate::he::{aggregate_sensitivity, build_mask, gradient_sensitivity, he_aggregate, protect, unprotect, EncryptionMask, HeBackend, HeCostModel};
use crate::model::{accuracy, apply_step, batch_gradient, init_model, ModelArch, ModelError, ParameterVector};
use crate::rng::{self, purpose};

/// Source of elapsed seconds. The std companion supplies a wall clock;
/// [`FrozenClock`] makes compute time purely modeled.
pub trait Clock {
    fn now(&self) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Caps local SGD steps per round; attack simulations use 1.
    #[cfg_attr(feature = "serde", serde(default))]
    pub max_steps: Option<usize>,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 32, lr: 0.1, max_steps: None }
    }
}

/// One client's training material. `authentic` may already contain mixed-in
/// synthetic samples; `synthetic` feeds synthetic rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub authentic: Dataset,
    pub synthetic: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TrainingSpec {
    pub arch: ModelArch,
    pub protection: ProtectionConfig,
    pub rounds: usize,
    pub local: LocalTraining,
    pub seed: u64,
    pub cost: HeCostModel,
    /// Batch size of the sensitivity warm-up pass.
    pub warmup_batch: usize,
    pub stop_at_convergence: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RoundLog {
    pub round: usize,
    pub plan: RoundPlan,
    pub accuracy: f64,
    pub uplink_bytes: f64,
    pub downlink_bytes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub record: RunRecord,
    pub params: ParameterVector,
    pub log: Vec<RoundLog>,
    pub mask: Option<EncryptionMask>,
}

/// Partitions `train` with Dirichlet(α), provisions synthetic data (given,
/// or fitted from `train`) split IID across clients, and mixes a fraction
/// `aug_ratio` of synthetic samples into each authentic shard.
pub fn prepare_clients(
    train: &Dataset,
    clients: usize,
    alpha: f64,
    aug_ratio: f64,
    synthetic: Option<&Dataset>,
    seed: u64,
    variance_floor: f64,
) -> Result<Vec<ClientData>, FlError> {
    let shards = dirichlet_partition(train, &PartitionSpec { clients, alpha, seed })?;
    let generated;
    let synthetic = match synthetic {
        Some(s) => s,
        None => {
            generated = surrogate_synthetic(train, seed, variance_floor)?;
            &generated
        }
    };
    let syn_shards = iid_split(synthetic, clients, seed)?;
    shards
        .into_iter()
        .zip(syn_shards)
        .enumerate()
        .map(|(i, (auth, syn))| {
            let authentic = mix_augment(&auth, &syn, &AugmentationSpec { ratio: aug_ratio }, rng::derive_key(seed, &[i as u64]))?;
            Ok(ClientData { authentic, synthetic: Some(syn) })
        })
        .collect()
}

/// Warm-up sensitivity pass at `params` over each client's authentic data,
/// aggregated with `|d_i|/|D|` weights, then the top-η mask.
pub fn build_round_mask(params: &ParameterVector, clients: &[ClientData], eta: f64, batch: usize) -> Result<EncryptionMask, FlError> {
    let scores = clients
        .iter()
        .map(|c| gradient_sensitivity(params, &c.authentic, batch))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = fedavg_weights(&clients.iter().map(|c| c.authentic.len()).collect::<Vec<_>>());
    Ok(build_mask(&aggregate_sensitivity(&scores, &weights)?, eta)?)
}

fn local_train(
    params: &ParameterVector,
    data: &Dataset,
    dp: Option<&DpParams>,
    local: &LocalTraining,
    seed: u64,
    client: u64,
    round: u64,
) -> Result<(ParameterVector, u64), ModelError> {
    let mut shuffle = rng::stream(seed, &[purpose::SHUFFLE, client, round]);
    let mut noise = rng::stream(seed, &[purpose::NOISE, client, round]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut p = params.clone();
    let mut steps = 0u64;
    let cap = local.max_steps.unwrap_or(usize::MAX) as u64;
    'outer: for _ in 0..local.epochs.max(1) {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(local.batch_size.max(1)) {
            if steps >= cap {
                break 'outer;
            }
            let batch = data.batch(chunk);
            p = match dp {
                Some(dp) => dp_sgd_step(&p, &batch, dp, local.lr, &mut noise)?,
                None => apply_step(&p, &batch_gradient(&p, &batch)?.1, local.lr)?,
            };
            steps += 1;
        }
    }
    Ok((p, steps))
}

/// Runs FedAvg for up to `spec.rounds` rounds under `spec.protection`.
pub fn run_training(
    spec: &TrainingSpec,
    clients: &[ClientData],
    test: &Dataset,
    backend: &dyn HeBackend,
    clock: &dyn Clock,
) -> Result<TrainingOutcome, FlError> {
    let prot = &spec.protection;
    prot.validate()?;
    if clients.is_empty() {
        return Err(FlError::Config("no clients"));
    }
    if !spec.cost.is_valid() {
        return Err(FlError::Config("cost model coefficients must be non-negative"));
    }
    let mut global = init_model(&spec.arch, spec.seed)?;
    let dim = global.len();
    let (sigma, eta, _) = prot.effective();
    let mask = if prot.uses_he() { Some(build_round_mask(&global, clients, eta, spec.warmup_batch)?) } else { None };
    let hidden = mask.as_ref().map_or(0, EncryptionMask::hidden_count);
    let dp_params: Vec<DpParams> = clients
        .iter()
        .map(|c| DpParams::for_dataset(sigma.max(0.0), prot.clip_norm, spec.local.batch_size, c.authentic.len()))
        .collect::<Result<_, _>>()?;
    let detector = prot.detector();
    let cost = backend.cost();

    let mut dp_steps = vec![0u64; clients.len()];
    let mut history = Vec::with_capacity(spec.rounds);
    let mut log = Vec::with_capacity(spec.rounds);
    let (mut comm, mut crypto, mut wall) = (0.0f64, 0.0f64, 0.0f64);
    let mut best = f64::NEG_INFINITY;
    let mut converged_at = None;

    for t in 1..=spec.rounds {
        let plan = prot.plan(t as u64);
        let started = clock.now();
        let mut locals = Vec::with_capacity(clients.len());
        let mut sizes = Vec::with_capacity(clients.len());
        for (i, c) in clients.iter().enumerate() {
            let data = match plan.data {
                RoundData::Authentic => &c.authentic,
                RoundData::Synthetic => c.synthetic.as_ref().ok_or(FlError::Config("synthetic round without synthetic data"))?,
            };
            let dp = if plan.dp { Some(&dp_params[i]) } else { None };
            let (p, steps) = local_train(&global, data, dp, &spec.local, spec.seed, i as u64, t as u64)
                .map_err(|source| FlError::Diverged { round: t, source })?;
            if plan.dp {
                dp_steps[i] += steps;
            }
            locals.push(p);
            sizes.push(data.len());
        }
        let (up, down) = match (&mask, plan.he) {
            (Some(mask), true) => {
                let prot_updates = locals
                    .iter()
                    .map(|p| protect(p.values(), mask, backend))
                    .collect::<Result<Vec<_>, _>>()?;
                let agg = he_aggregate(&prot_updates, &fedavg_weights(&sizes), backend)?;
                let values = unprotect(&agg, mask, backend)?;
                global = global.with_values(values).map_err(|source| FlError::Diverged { round: t, source })?;
                let n = clients.len() as f64;
                crypto += hidden as f64
                    * n
                    * (cost.encrypt_secs_per_coord + cost.aggregate_secs_per_coord + cost.decrypt_secs_per_coord);
                let up = prot_updates.iter().map(|u| u.bytes() as f64).sum::<f64>() / n;
                (up, agg.bytes() as f64)
            }
            _ => {
                global = fedavg_aggregate(&locals, &sizes).map_err(|e| match e {
                    FlError::Model(source) => FlError::Diverged { round: t, source },
                    other => other,
                })?;
                (4.0 * dim as f64, 4.0 * dim as f64)
            }
        };
        wall += clock.now() - started;
        comm += up + down;
        let acc = accuracy(&global, test.samples(), test.labels())?;
        best = best.max(acc);
        history.push(acc);
        log.push(RoundLog { round: t, plan, accuracy: acc, uplink_bytes: up, downlink_bytes: down });
        if converged_at.is_none() {
            converged_at = detect_convergence(&history, &detector);
            if converged_at.is_some() && spec.stop_at_convergence {
                break;
            }
        }
    }

    let epsilon = dp_steps
        .iter()
        .zip(&dp_params)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, p)| rdp_epsilon(p, s).epsilon)
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    let rounds_run = history.len();
    let record = RunRecord {
        config: prot.clone(),
        seed: spec.seed,
        best_accuracy: if best.is_finite() { best } else { 0.0 },
        final_accuracy: history.last().copied().unwrap_or(0.0),
        convergence_round: converged_at.unwrap_or(rounds_run),
        converged: converged_at.is_some(),
        rounds_run,
        comm_bytes_per_client: comm,
        compute_secs: wall.max(0.0) + crypto,
        crypto_secs: crypto,
        wall_secs: wall.max(0.0),
        epsilon,
        accuracy_history: history,
    };
    Ok(TrainingOutcome { record, params: global, log, mask })
}
