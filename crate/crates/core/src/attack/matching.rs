//! Derivatives of gradient-matching objectives with respect to the dummy
//! input and soft label.
//!
//! Both passive attacks reduce to the same primitive: for a residual `R`
//! over parameter coordinates (zero where hidden), the pull-back of
//! `S(x, y) = <R, ∇θ L(x, y)>` onto `x` and `y`.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{softmax_cross_entropy, Activation, LayerSpec, ModelError, Network, Target};

/// Gradient of the model at a dummy point, and the pull-backs of `<R, g>`.
#[derive(Debug, Clone)]
pub struct Pullback {
    /// `∇θ L(x, y)`.
    pub grad: Vec<f64>,
    /// `∂S/∂x`.
    pub dx: Vec<f64>,
    /// `∂S/∂y`, defined up to an additive constant (softmax Jacobians
    /// annihilate it).
    pub dy: Vec<f64>,
}

/// Whether the closed form applies: dense ReLU layer, then dense output.
pub fn is_two_layer_fc(net: &Network) -> bool {
    matches!(
        net.arch().layers.as_slice(),
        [LayerSpec::Dense { activation: Activation::Relu, .. }, LayerSpec::Dense { activation: Activation::Identity, .. }]
    )
}

/// Model gradient at `(x, y)` for a soft target `y`.
pub fn model_gradient(net: &Network, params: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(net.sample_gradient(params, x, Target::Soft(y))?.params)
}

/// Closed form for the two-layer FC network.
pub fn pullback_two_layer(net: &Network, params: &[f64], x: &[f64], y: &[f64], r: &[f64]) -> Result<Pullback, ModelError> {
    let lay = net.layout();
    let (d, h) = (lay[0].input.len(), lay[0].output.len());
    let k = lay[1].output.len();
    let w1 = &params[lay[0].weight_offset..lay[0].weight_offset + h * d];
    let b1 = &params[lay[0].bias_offset..lay[0].bias_offset + h];
    let w2 = &params[lay[1].weight_offset..lay[1].weight_offset + k * h];
    let b2 = &params[lay[1].bias_offset..lay[1].bias_offset + k];
    let rw1 = &r[lay[0].weight_offset..lay[0].weight_offset + h * d];
    let rb1 = &r[lay[0].bias_offset..lay[0].bias_offset + h];
    let rw2 = &r[lay[1].weight_offset..lay[1].weight_offset + k * h];
    let rb2 = &r[lay[1].bias_offset..lay[1].bias_offset + k];

    let dot = |row: &[f64], v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let z1: Vec<f64> = (0..h).map(|j| dot(&w1[j * d..(j + 1) * d], x) + b1[j]).collect();
    if z1.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { layer: 0 });
    }
    let m: Vec<f64> = z1.iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect();
    let a: Vec<f64> = z1.iter().zip(&m).map(|(z, m)| z * m).collect();
    let z2: Vec<f64> = (0..k).map(|c| dot(&w2[c * h..(c + 1) * h], &a) + b2[c]).collect();
    if z2.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { layer: 1 });
    }
    let (_, p, delta2) = softmax_cross_entropy(&z2, Target::Soft(y), k)?;
    let delta1: Vec<f64> = (0..h).map(|j| m[j] * (0..k).map(|c| w2[c * h + j] * delta2[c]).sum::<f64>()).collect();

    let mut grad = vec![0.0; params.len()];
    for j in 0..h {
        for i in 0..d {
            grad[lay[0].weight_offset + j * d + i] = delta1[j] * x[i];
        }
        grad[lay[0].bias_offset + j] = delta1[j];
    }
    for c in 0..k {
        for j in 0..h {
            grad[lay[1].weight_offset + c * h + j] = delta2[c] * a[j];
        }
        grad[lay[1].bias_offset + c] = delta2[c];
    }

    let a1: Vec<f64> = (0..h).map(|j| dot(&rw1[j * d..(j + 1) * d], x) + rb1[j]).collect();
    let ma1: Vec<f64> = a1.iter().zip(&m).map(|(v, m)| v * m).collect();
    let cvec: Vec<f64> = (0..k).map(|c| dot(&w2[c * h..(c + 1) * h], &ma1) + dot(&rw2[c * h..(c + 1) * h], &a) + rb2[c]).collect();
    let pc = dot(&p, &cvec);
    let jpc: Vec<f64> = p.iter().zip(&cvec).map(|(p, c)| p * c - p * pc).collect();
    let e: Vec<f64> = (0..h).map(|j| (0..k).map(|c| w2[c * h + j] * jpc[c] + rw2[c * h + j] * delta2[c]).sum::<f64>()).collect();
    let mut dx = vec![0.0; d];
    for j in 0..h {
        let (u, v) = (delta1[j], m[j] * e[j]);
        if u == 0.0 && v == 0.0 {
            continue;
        }
        for i in 0..d {
            dx[i] += rw1[j * d + i] * u + w1[j * d + i] * v;
        }
    }
    let dy = cvec.iter().map(|c| -c).collect();
    Ok(Pullback { grad, dx, dy })
}

/// Architecture-agnostic pull-back by central differences along `R` in
/// parameter space: `∂S/∂x = d/dε ∇x L(x, θ + εR)`, and for the label,
/// `∂S/∂y_k = d/dε [−log p_k(θ + εR)]`.
pub fn pullback_directional(net: &Network, params: &[f64], x: &[f64], y: &[f64], r: &[f64]) -> Result<Pullback, ModelError> {
    let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sg = net.sample_gradient(params, x, Target::Soft(y))?;
    if scale == 0.0 {
        return Ok(Pullback { grad: sg.params, dx: vec![0.0; x.len()], dy: vec![0.0; y.len()] });
    }
    let eps = 1e-5 / scale;
    let shifted = |sign: f64| -> Vec<f64> { params.iter().zip(r).map(|(p, r)| p + sign * eps * r).collect() };
    let (plus, minus) = (shifted(1.0), shifted(-1.0));
    let gp = net.sample_gradient(&plus, x, Target::Soft(y))?;
    let gm = net.sample_gradient(&minus, x, Target::Soft(y))?;
    let dx = gp.input.iter().zip(&gm.input).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let zp = net.logits(&plus, x)?;
    let zm = net.logits(&minus, x)?;
    let dz: Vec<f64> = zp.iter().zip(&zm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let pdz: f64 = sg.probs.iter().zip(&dz).map(|(p, d)| p * d).sum();
    let dy = dz.iter().map(|d| pdz - d).collect();
    Ok(Pullback { grad: sg.params, dx, dy })
}

pub fn pullback(net: &Network, params: &[f64], x: &[f64], y: &[f64], r: &[f64]) -> Result<Pullback, ModelError> {
    if is_two_layer_fc(net) {
        pullback_two_layer(net, params, x, y, r)
    } else {
        pullback_directional(net, params, x, y, r)
    }
}

/// `J^T v` for the softmax Jacobian `diag(y) − y yᵀ` (symmetric).
pub fn softmax_jvp(y: &[f64], v: &[f64]) -> Vec<f64> {
    let yv: f64 = y.iter().zip(v).map(|(a, b)| a * b).sum();
    y.iter().zip(v).map(|(y, v)| y * (v - yv)).collect()
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}
