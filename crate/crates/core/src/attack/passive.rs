use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::lbfgs::{minimize, LbfgsOptions};
use super::matching::{model_gradient, pullback, softmax, softmax_jvp};
use super::{AttackConfig, AttackError, ObservedGradient, Reconstruction};
use crate::model::{Network, ParameterVector, Shape};
use crate::rng::{self, purpose};

fn split_observation(obs: &ObservedGradient) -> (Vec<f64>, Vec<bool>) {
    let o = obs.values.iter().map(|v| v.unwrap_or(0.0)).collect();
    let vis = obs.values.iter().map(Option::is_some).collect();
    (o, vis)
}

fn check_len(obs: &ObservedGradient, params: &ParameterVector) -> Result<(), AttackError> {
    if obs.len() != params.len() {
        return Err(AttackError::LengthMismatch { expected: params.len(), actual: obs.len() });
    }
    Ok(())
}

/// Label from the sign structure of the output layer's gradient. With a
/// softmax cross-entropy loss only the true class has a negative bias
/// gradient, and its weight row is non-positive when the layer's inputs are
/// non-negative. Returns `None` when no visible coordinate is informative.
pub fn infer_label(obs: &ObservedGradient, net: &Network) -> Option<usize> {
    let last = net.layout().last()?;
    let k = last.bias_len;
    let fan_in = last.weight_len / k.max(1);
    let mut best: Option<(f64, usize)> = None;
    for c in 0..k {
        let score = match obs.values[last.bias_offset + c] {
            Some(b) => Some(b),
            None => {
                let row = &obs.values[last.weight_offset + c * fan_in..last.weight_offset + (c + 1) * fan_in];
                let vis: Vec<f64> = row.iter().flatten().copied().collect();
                if vis.iter().all(|v| *v == 0.0) {
                    None
                } else {
                    Some(vis.iter().sum())
                }
            }
        };
        if let Some(s) = score {
            if best.is_none_or(|(b, _)| s < b) {
                best = Some((s, c));
            }
        }
    }
    best.filter(|(s, _)| *s < 0.0).map(|(_, c)| c)
}

/// Jointly optimizes a dummy image and soft label so the dummy gradient
/// matches the observation in squared distance over visible coordinates.
pub fn dlg_attack(obs: &ObservedGradient, params: &ParameterVector, cfg: &AttackConfig, seed: u64) -> Result<Reconstruction, AttackError> {
    check_len(obs, params)?;
    if obs.fully_hidden() {
        return Ok(Reconstruction::failed());
    }
    let net = params.network();
    let (d, k) = (net.feature_len(), net.classes());
    let (o, vis) = split_observation(obs);
    let w = params.values();
    let mut r = rng::stream(seed, &[purpose::ATTACK, 1]);
    let mut z0: Vec<f64> = (0..d).map(|_| r.random_range(0.0..1.0)).collect();
    z0.extend((0..k).map(|_| rng::standard_normal(&mut r)));

    let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
        let (x, u) = z.split_at(d);
        let y = softmax(u);
        let g = model_gradient(net, w, x, &y).ok()?;
        let mut loss = 0.0;
        let res: Vec<f64> = g
            .iter()
            .zip(&o)
            .zip(&vis)
            .map(|((g, o), &v)| {
                if v {
                    loss += (g - o) * (g - o);
                    2.0 * (g - o)
                } else {
                    0.0
                }
            })
            .collect();
        let pb = pullback(net, w, x, &y, &res).ok()?;
        let mut grad = pb.dx;
        grad.extend(softmax_jvp(&y, &pb.dy));
        Some((loss, grad))
    };
    let opts = LbfgsOptions { max_iterations: cfg.iterations, f_target: 1e-14, ..Default::default() };
    Ok(match minimize(objective, z0, &opts) {
        Some(res) if res.f.is_finite() => Reconstruction { images: vec![res.x[..d].to_vec()], rows: Vec::new(), loss: Some(res.f), failed: false },
        _ => Reconstruction::failed(),
    })
}

fn total_variation(x: &[f64], shape: Shape, grad: Option<&mut [f64]>) -> f64 {
    let (h, w) = (shape.height, shape.width);
    let mut tv = 0.0;
    let mut grad = grad;
    for c in 0..shape.channels {
        for i in 0..h {
            for j in 0..w {
                let at = c * h * w + i * w + j;
                for nb in [(j + 1 < w).then(|| at + 1), (i + 1 < h).then(|| at + w)].into_iter().flatten() {
                    let diff = x[nb] - x[at];
                    tv += libm::fabs(diff);
                    if let Some(g) = grad.as_deref_mut() {
                        let s = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                        g[nb] += s;
                        g[at] -= s;
                    }
                }
            }
        }
    }
    tv
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Minimizes `1 − cos(dummy gradient, observation) + λ·TV(x)` over visible
/// coordinates with Adam on the sign of the gradient, keeping pixels in
/// `[0, 1]`. The label is inferred up front.
pub fn inverting_attack(obs: &ObservedGradient, params: &ParameterVector, cfg: &AttackConfig, seed: u64) -> Result<Reconstruction, AttackError> {
    check_len(obs, params)?;
    if obs.fully_hidden() {
        return Ok(Reconstruction::failed());
    }
    let net = params.network();
    let (d, k) = (net.feature_len(), net.classes());
    let shape = net.arch().input;
    let (o, vis) = split_observation(obs);
    let onorm = libm::sqrt(o.iter().map(|v| v * v).sum::<f64>());
    if onorm == 0.0 {
        return Ok(Reconstruction::failed());
    }
    let w = params.values();
    let mut r = rng::stream(seed, &[purpose::ATTACK, 2]);
    let label = infer_label(obs, net).unwrap_or_else(|| r.random_range(0..k));
    let mut y = vec![0.0; k];
    y[label] = 1.0;
    let mut x: Vec<f64> = (0..d).map(|_| r.random_range(0.0..1.0)).collect();

    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let n = cfg.iterations.max(1);
    for it in 0..n {
        let g = model_gradient(net, w, &x, &y)?;
        let (mut gg, mut go) = (0.0, 0.0);
        for ((g, o), &vv) in g.iter().zip(&o).zip(&vis) {
            if vv {
                gg += g * g;
                go += g * o;
            }
        }
        let gnorm = libm::sqrt(gg);
        let cos = if gnorm > 0.0 { go / (gnorm * onorm) } else { 0.0 };
        let mut tv_grad = vec![0.0; d];
        let tv = total_variation(&x, shape, Some(&mut tv_grad));
        let loss = 1.0 - cos + cfg.tv_weight * tv;
        if !loss.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, x.clone()));
        }
        let mut dx = if gnorm > 0.0 {
            let res: Vec<f64> = g
                .iter()
                .zip(&o)
                .zip(&vis)
                .map(|((g, o), &vv)| if vv { -(o / (gnorm * onorm) - cos * g / gg) } else { 0.0 })
                .collect();
            pullback(net, w, &x, &y, &res)?.dx
        } else {
            vec![0.0; d]
        };
        dx.iter_mut().zip(&tv_grad).for_each(|(a, t)| *a += cfg.tv_weight * t);

        let frac = it as f64 / n as f64;
        let lr = cfg.step_size * if frac < 0.375 { 1.0 } else if frac < 0.625 { 0.1 } else if frac < 0.875 { 0.01 } else { 0.001 };
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - libm::pow(b1, t as f64), 1.0 - libm::pow(b2, t as f64));
        for i in 0..d {
            let s = sign(dx[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * s;
            v[i] = b2 * v[i] + (1.0 - b2) * s * s;
            x[i] = (x[i] - lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps)).clamp(0.0, 1.0);
        }
    }
    Ok(match best {
        Some((loss, img)) => Reconstruction { images: vec![img], rows: Vec::new(), loss: Some(loss), failed: false },
        None => Reconstruction::failed(),
    })
}
