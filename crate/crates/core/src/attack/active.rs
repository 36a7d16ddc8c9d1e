//! Analytic attacks by a server that rewrites the first dense layer.
//!
//! For a dense layer `z = Wx + b`, each sample contributes `δ_r·x` to row
//! `r`'s weight gradient and `δ_r` to its bias gradient, so a row touched by
//! exactly one sample yields that sample as `∇W_r / ∇b_r`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{AttackError, CandidatePool, ObservedGradient, Reconstruction};
use crate::model::{LayerLayout, ModelArch, ParameterVector, Shape};
use crate::rng::{self, purpose};

/// Bias-gradient differences below this fraction of the largest one are
/// treated as rounding noise.
const RELATIVE_FLOOR: f64 = 1e-6;

fn midpoint_threshold(sorted: &[f64], upper_count: usize) -> f64 {
    let n = sorted.len();
    let i = n.saturating_sub(upper_count.min(n));
    match i {
        0 => sorted[0] - 1.0,
        i if i >= n => sorted[n - 1] + 1.0,
        i => 0.5 * (sorted[i - 1] + sorted[i]),
    }
}

fn fill_output_layer(values: &mut [f64], out: &LayerLayout, column: impl Fn(usize, usize) -> f64) {
    let k = out.bias_len;
    let fan_in = out.weight_len / k;
    for c in 0..k {
        for j in 0..fan_in {
            values[out.weight_offset + c * fan_in + j] = column(c, j);
        }
        values[out.bias_offset + c] = 0.0;
    }
}

fn first_layer(params: &ParameterVector) -> &LayerLayout {
    &params.network().layout()[0]
}

/// Trap-weight model: each first-layer row puts negative weight on a random
/// half of the pixels and positive weight on the rest, with its bias set so
/// that about `1/batch` of the attacker's prior activates it.
pub fn cah_model(input: Shape, rows: usize, classes: usize, prior: &CandidatePool, batch: usize, seed: u64) -> Result<ParameterVector, AttackError> {
    let arch = ModelArch::desk_mlp(input, rows, classes);
    let mut p = crate::model::init_model(&arch, seed)?;
    let mut values = p.values().to_vec();
    let lay = p.network().layout().to_vec();
    let d = input.len();
    let mut r = rng::stream(seed, &[purpose::ATTACK, 3]);
    let upper = prior.len().div_ceil(batch.max(1)).max(1);
    let mut order: Vec<usize> = (0..d).collect();
    for row in 0..rows {
        order.shuffle(&mut r);
        let mut w = vec![0.0; d];
        for (rank, &i) in order.iter().enumerate() {
            let mag = libm::fabs(rng::standard_normal(&mut r));
            w[i] = if rank < d / 2 { -mag } else { mag };
        }
        let mut z: Vec<f64> = (0..prior.len()).map(|s| w.iter().zip(prior.image(s)).map(|(a, b)| a * b).sum()).collect();
        z.sort_by(f64::total_cmp);
        values[lay[0].weight_offset + row * d..lay[0].weight_offset + (row + 1) * d].copy_from_slice(&w);
        values[lay[0].bias_offset + row] = -midpoint_threshold(&z, upper);
    }
    let scale = 1.0 / libm::sqrt(rows as f64);
    let out: Vec<f64> = (0..classes * rows).map(|_| scale * rng::standard_normal(&mut r)).collect();
    fill_output_layer(&mut values, &lay[1], |c, j| out[c * rows + j]);
    p = p.with_values(values)?;
    Ok(p)
}

/// Imprint model: every first-layer row measures mean brightness, with
/// thresholds at `bins` quantiles of the prior; all output-layer columns are
/// equal so every row sees the same per-sample upstream gradient.
pub fn rtf_model(input: Shape, bins: usize, classes: usize, prior: &CandidatePool, seed: u64) -> Result<ParameterVector, AttackError> {
    let arch = ModelArch::desk_mlp(input, bins, classes);
    let p = crate::model::init_model(&arch, seed)?;
    let mut values = p.values().to_vec();
    let lay = p.network().layout().to_vec();
    let d = input.len();
    let mut bright: Vec<f64> = (0..prior.len()).map(|s| prior.image(s).iter().sum::<f64>() / d as f64).collect();
    bright.sort_by(f64::total_cmp);
    let n = bright.len();
    for row in 0..bins {
        values[lay[0].weight_offset + row * d..lay[0].weight_offset + (row + 1) * d].fill(1.0 / d as f64);
        let above = n - (row * n) / bins;
        values[lay[0].bias_offset + row] = -midpoint_threshold(&bright, above);
    }
    let mut r = rng::stream(seed, &[purpose::ATTACK, 4]);
    let v: Vec<f64> = (0..classes).map(|_| rng::standard_normal(&mut r) / bins as f64).collect();
    fill_output_layer(&mut values, &lay[1], |c, _| v[c]);
    Ok(p.with_values(values)?)
}

/// Positions of `batch` samples that activate each first-layer row.
pub fn row_activations(params: &ParameterVector, batch: &[&[f64]]) -> Vec<Vec<usize>> {
    let lay = first_layer(params);
    let d = lay.input.len();
    let w = params.values();
    (0..lay.bias_len)
        .map(|row| {
            let wr = &w[lay.weight_offset + row * d..lay.weight_offset + (row + 1) * d];
            let b = w[lay.bias_offset + row];
            (0..batch.len()).filter(|&i| wr.iter().zip(batch[i]).map(|(a, x)| a * x).sum::<f64>() + b > 0.0).collect()
        })
        .collect()
}

/// Ground-truth sources of each CAH row.
pub fn cah_sources(params: &ParameterVector, batch: &[&[f64]]) -> Vec<Vec<usize>> {
    row_activations(params, batch)
}

/// Ground-truth sources of each RTF bin: samples active at the row but not
/// at the next one.
pub fn rtf_sources(params: &ParameterVector, batch: &[&[f64]]) -> Vec<Vec<usize>> {
    let act = row_activations(params, batch);
    (0..act.len())
        .map(|r| match act.get(r + 1) {
            Some(next) => act[r].iter().copied().filter(|i| !next.contains(i)).collect(),
            None => act[r].clone(),
        })
        .collect()
}

fn row_gradients<'a>(obs: &'a ObservedGradient, lay: &LayerLayout, row: usize) -> (Option<f64>, &'a [Option<f64>]) {
    let d = lay.input.len();
    (obs.values[lay.bias_offset + row], &obs.values[lay.weight_offset + row * d..lay.weight_offset + (row + 1) * d])
}

fn ratio_image(num: impl Iterator<Item = Option<f64>>, den: f64, fill: &[f64]) -> Vec<f64> {
    num.zip(fill).map(|(v, f)| v.map_or(*f, |v| v / den)).collect()
}

fn check(obs: &ObservedGradient, params: &ParameterVector, fill: &[f64]) -> Result<(), AttackError> {
    if obs.len() != params.len() {
        return Err(AttackError::LengthMismatch { expected: params.len(), actual: obs.len() });
    }
    let d = first_layer(params).input.len();
    if fill.len() != d {
        return Err(AttackError::LengthMismatch { expected: d, actual: fill.len() });
    }
    Ok(())
}

/// One reconstruction per first-layer row with a non-zero, visible bias
/// gradient. Hidden pixels fall back to `fill` (the attacker's prior mean).
pub fn cah_attack(obs: &ObservedGradient, params: &ParameterVector, fill: &[f64]) -> Result<Reconstruction, AttackError> {
    check(obs, params, fill)?;
    let lay = first_layer(params);
    let rows = lay.bias_len;
    let biases: Vec<Option<f64>> = (0..rows).map(|r| row_gradients(obs, lay, r).0).collect();
    let top = biases.iter().flatten().fold(0.0f64, |m, b| m.max(libm::fabs(*b)));
    let (mut images, mut kept) = (Vec::new(), Vec::new());
    for (row, b) in biases.iter().enumerate() {
        let Some(b) = *b else { continue };
        if b == 0.0 || libm::fabs(b) <= RELATIVE_FLOOR * top {
            continue;
        }
        let (_, w) = row_gradients(obs, lay, row);
        images.push(ratio_image(w.iter().copied(), b, fill));
        kept.push(row);
    }
    Ok(Reconstruction { images, rows: kept, loss: None, failed: false })
}

/// Reconstructs each bin from the difference of adjacent rows' gradients;
/// the top bin stands alone.
pub fn rtf_attack(obs: &ObservedGradient, params: &ParameterVector, fill: &[f64]) -> Result<Reconstruction, AttackError> {
    check(obs, params, fill)?;
    let lay = first_layer(params);
    let rows = lay.bias_len;
    let biases: Vec<Option<f64>> = (0..rows).map(|r| row_gradients(obs, lay, r).0).collect();
    let top = biases.iter().flatten().fold(0.0f64, |m, b| m.max(libm::fabs(*b)));
    let (mut images, mut kept) = (Vec::new(), Vec::new());
    for row in 0..rows {
        let (Some(b), w) = row_gradients(obs, lay, row) else { continue };
        let (den, img) = if row + 1 < rows {
            let (Some(bn), wn) = row_gradients(obs, lay, row + 1) else { continue };
            let diff = w.iter().zip(wn).map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            });
            (b - bn, diff.collect::<Vec<_>>())
        } else {
            (b, w.to_vec())
        };
        if den == 0.0 || libm::fabs(den) <= RELATIVE_FLOOR * top {
            continue;
        }
        images.push(ratio_image(img.into_iter(), den, fill));
        kept.push(row);
    }
    Ok(Reconstruction { images, rows: kept, loss: None, failed: false })
}
