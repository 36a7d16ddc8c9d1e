//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Integer orders use the exact binomial expansion; fractional orders use the
//! two-sided erfc series. Per-step RDP composes additively and is converted
//! to (ε, δ) with `ε = min_α rdp(α) + ln(1/δ)/(α − 1)`.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::dp::DpParams;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BudgetReport {
    /// `f64::INFINITY` when σ = 0 and at least one step was taken.
    pub epsilon: f64,
    pub delta: f64,
    pub steps: u64,
    pub sigma: f64,
    pub sample_rate: f64,
    /// Order attaining the minimum; `None` when ε is 0 or infinite.
    pub order: Option<f64>,
}

/// 1.25, 1.5, …, 64 followed by the integers 65..=256.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=256).map(|k| k as f64 * 0.25).collect();
    orders.extend((65..=256).map(|k| k as f64));
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + libm::log1p(libm::exp(lo - hi))
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + libm::log1p(-libm::exp(b - a))
}

/// `ln erfc(x)`, accurate where `erfc` itself underflows.
pub fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return libm::log(libm::erfc(x));
    }
    let x2 = x * x;
    let series = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2) + 6.5625 / (x2 * x2 * x2 * x2);
    -x2 - libm::log(x) - 0.5 * libm::log(core::f64::consts::PI) + libm::log(series)
}

fn ln_binom_int(n: u64, k: u64) -> f64 {
    libm::lgamma((n + 1) as f64) - libm::lgamma((k + 1) as f64) - libm::lgamma((n - k + 1) as f64)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    let (lq, l1q) = (libm::log(q), libm::log1p(-q));
    for i in 0..=alpha {
        let fi = i as f64;
        let term = ln_binom_int(alpha, i) + fi * lq + (alpha - i) as f64 * l1q + (fi * fi - fi) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * libm::log(1.0 / q - 1.0) + 0.5;
    let (lq, l1q) = (libm::log(q), libm::log1p(-q));
    let s2 = core::f64::consts::SQRT_2 * sigma;
    // Generalized binomial coefficient C(α, i), tracked as sign and log-magnitude.
    let mut log_coef = 0.0;
    let mut positive = true;
    let mut i = 0u32;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let t0 = log_coef + fi * lq + j * l1q;
        let t1 = log_coef + j * lq + fi * l1q;
        let e0 = libm::log(0.5) + log_erfc((fi - z0) / s2);
        let e1 = libm::log(0.5) + log_erfc((z0 - j) / s2);
        let s0 = t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + e0;
        let s1 = t1 + (j * j - j) / (2.0 * sigma * sigma) + e1;
        if positive {
            a0 = log_add(a0, s0);
            a1 = log_add(a1, s1);
        } else {
            a0 = log_sub(a0, s0);
            a1 = log_sub(a1, s1);
        }
        if s0.max(s1) < -30.0 || i > 100_000 {
            break;
        }
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio < 0.0 {
            positive = !positive;
        }
        log_coef += libm::log(libm::fabs(ratio));
        i += 1;
    }
    log_add(a0, a1)
}

/// RDP of one subsampled Gaussian step at order `alpha > 1`.
pub fn rdp_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha == libm::floor(alpha) {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

/// Converts composed RDP values to ε at `delta`; returns (ε, order).
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> (f64, Option<f64>) {
    let mut best = (f64::INFINITY, None);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = r + libm::log(1.0 / delta) / (a - 1.0);
        if eps < best.0 {
            best = (eps, Some(a));
        }
    }
    (best.0.max(0.0), best.1)
}

/// Cumulative (ε, δ) after `steps` DP-SGD steps over the default order grid.
pub fn rdp_epsilon(dp: &DpParams, steps: u64) -> BudgetReport {
    rdp_epsilon_with_orders(dp, steps, &default_orders())
}

pub fn rdp_epsilon_with_orders(dp: &DpParams, steps: u64, orders: &[f64]) -> BudgetReport {
    let report = |epsilon, order| BudgetReport { epsilon, delta: dp.delta, steps, sigma: dp.sigma, sample_rate: dp.sample_rate, order };
    if steps == 0 {
        return report(0.0, None);
    }
    if dp.sigma == 0.0 {
        return report(f64::INFINITY, None);
    }
    let rdp: Vec<f64> = orders.iter().map(|&a| steps as f64 * rdp_step(dp.sample_rate, dp.sigma, a)).collect();
    let (eps, order) = rdp_to_epsilon(orders, &rdp, dp.delta);
    report(eps, order)
}
