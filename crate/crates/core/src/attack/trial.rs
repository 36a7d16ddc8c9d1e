use alloc::vec;
use alloc::vec::Vec;

use super::{
    cah_attack, cah_model, cah_sources, rtf_sources, dlg_attack, identified_targets, inverting_attack, rtf_attack, rtf_model, AttackConfig, AttackError, AttackKind,
    AttackOutcome, CandidatePool, ObservedGradient,
};
use crate::dp::{dp_sgd_step, DpParams};
use crate::fl::{Method, ProtectionConfig};
use crate::he::{attacker_view, build_mask, gradient_sensitivity, protect, EncryptionMask, HeBackend};
use crate::model::{apply_step, batch_gradient, init_model, ModelArch};
use crate::rng::{self, purpose};

/// Everything a trial needs besides its protection setting and seed.
#[derive(Clone, Copy)]
pub struct AttackEnv<'a> {
    pub pool: &'a CandidatePool,
    /// Model attacked by the passive attacks.
    pub arch: &'a ModelArch,
    pub lr: f64,
    pub clip_norm: f64,
    /// Pool images used for the mask's sensitivity warm-up.
    pub warmup: usize,
    pub backend: &'a (dyn HeBackend + Sync),
}

/// Protection applied to one attacked client step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSetting {
    pub sigma: f64,
    pub eta: f64,
}

/// Per-trial settings for a method. PI splits its trials: the first
/// `round(trials·ρ)` see a DP round, the rest an HE round. Interleaving
/// methods are attacked on authentic rounds only.
pub fn trial_settings(prot: &ProtectionConfig, trials: usize) -> Vec<TrialSetting> {
    let (sigma, eta, ratio) = prot.effective();
    match prot.method {
        Method::Pi => {
            let n_dp = libm::round(trials as f64 * ratio.value()) as usize;
            let mut v = vec![TrialSetting { sigma, eta: 0.0 }; n_dp.min(trials)];
            v.resize(trials, TrialSetting { sigma: 0.0, eta });
            v
        }
        _ => vec![TrialSetting { sigma, eta }; trials],
    }
}

pub fn trial_seed(base: u64, k: usize) -> u64 {
    rng::derive_key(base, &[purpose::TRIAL, k as u64])
}

/// Fresh model, one client step on pool targets under `setting`, then the
/// attack on what the server observes.
pub fn run_trial(env: &AttackEnv<'_>, cfg: &AttackConfig, setting: TrialSetting, seed: u64) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let pool = env.pool;
    if pool.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    if cfg.batch_size > pool.len() {
        return Err(AttackError::Config("batch larger than the candidate pool"));
    }
    let mut r = rng::stream(seed, &[purpose::TRIAL]);
    let targets = rand::seq::index::sample(&mut r, pool.len(), cfg.batch_size).into_vec();
    let shape = pool.dataset().shape();
    let classes = pool.dataset().classes();
    let model_seed = rng::derive_key(seed, &[purpose::INIT]);
    let params = match cfg.kind {
        AttackKind::Dlg | AttackKind::Inverting => init_model(env.arch, model_seed)?,
        AttackKind::Cah => cah_model(shape, cfg.trap_rows, classes, pool, cfg.batch_size, model_seed)?,
        AttackKind::Rtf => rtf_model(shape, cfg.bins, classes, pool, model_seed)?,
    };
    let mask = if setting.eta > 0.0 {
        let warm: Vec<usize> = (0..env.warmup.clamp(1, pool.len())).collect();
        let warm = pool.dataset().subset(&warm).map_err(|_| AttackError::EmptyPool)?;
        build_mask(&gradient_sensitivity(&params, &warm, 32)?, setting.eta)?
    } else {
        EncryptionMask::none(params.len())
    };

    let batch = pool.dataset().batch(&targets);
    let next = if setting.sigma > 0.0 {
        let n = pool.len() as f64;
        let dp = DpParams::new(setting.sigma, env.clip_norm, (cfg.batch_size as f64 / n).min(1.0), 1.0 / n)
            .map_err(|_| AttackError::Config("invalid DP parameters"))?;
        let mut noise = rng::stream(seed, &[purpose::NOISE]);
        dp_sgd_step(&params, &batch, &dp, env.lr, &mut noise)?
    } else {
        apply_step(&params, &batch_gradient(&params, &batch)?.1, env.lr)?
    };
    let view = attacker_view(&protect(next.values(), &mask, env.backend)?, &mask)?;
    let obs = ObservedGradient::from_view(params.values(), &view, env.lr, setting.sigma)?;

    let rec = match cfg.kind {
        AttackKind::Dlg => dlg_attack(&obs, &params, cfg, seed)?,
        AttackKind::Inverting => inverting_attack(&obs, &params, cfg, seed)?,
        AttackKind::Cah => cah_attack(&obs, &params, &pool.mean_image())?,
        AttackKind::Rtf => rtf_attack(&obs, &params, &pool.mean_image())?,
    };
    let matched = if cfg.kind.is_active() {
        let xs: Vec<&[f64]> = targets.iter().map(|&t| pool.image(t)).collect();
        let per_row = if cfg.kind == AttackKind::Cah { cah_sources(&params, &xs) } else { rtf_sources(&params, &xs) };
        let sources: Vec<Vec<usize>> = rec.rows.iter().map(|&r| per_row[r].clone()).collect();
        identified_targets(&rec.images, &sources, pool, &targets)?
    } else {
        match rec.images.first() {
            Some(img) if !rec.failed => vec![pool.nearest(img)? == targets[0]],
            _ => vec![false],
        }
    };
    let success = matched.iter().filter(|&&m| m).count() as f64 / matched.len() as f64;
    Ok(AttackOutcome { reconstructions: rec.images, matched, success, seed, failed: rec.failed, loss: rec.loss })
}

/// Mean IIP over `trials` trials of `cfg` against `prot`, run sequentially.
pub fn success_rate(env: &AttackEnv<'_>, cfg: &AttackConfig, prot: &ProtectionConfig, trials: usize, base_seed: u64) -> Result<f64, AttackError> {
    if trials == 0 {
        return Err(AttackError::Config("at least one trial is required"));
    }
    let mut total = 0.0;
    for (k, s) in trial_settings(prot, trials).into_iter().enumerate() {
        total += run_trial(env, cfg, s, trial_seed(base_seed, k))?.success;
    }
    Ok(total / trials as f64)
}
