//! Minimal neural-network engine: flat parameter vectors, forward passes and
//! per-sample gradients of softmax cross-entropy.
//!
//! Parameters are laid out layer by layer, weights first (row-major, output
//! major) then biases. Convolution weights are `[out][in][ky][kx]`.

mod arch;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

pub use arch::{Activation, LayerLayout, LayerSpec, ModelArch, Shape};

use crate::rng::{self, purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture at layer {layer}: {reason}")]
    InvalidArch { layer: usize, reason: &'static str },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter vector contains non-finite values")]
    NonFiniteParams,
}

/// A validated architecture with its parameter layout resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: ModelArch,
    layout: Vec<LayerLayout>,
    param_count: usize,
}

/// Training target for one sample: a hard class or a probability vector.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Soft(&'a [f64]),
}

/// Loss and gradients for a single sample.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub params: Vec<f64>,
    pub input: Vec<f64>,
    pub probs: Vec<f64>,
}

struct Trace {
    /// `acts[l]` is the input of layer `l`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(arch: ModelArch) -> Result<Self, ModelError> {
        let layout = arch.layout()?;
        let param_count = layout.last().map(|l| l.bias_offset + l.bias_len).unwrap_or(0);
        Ok(Self { arch, layout, param_count })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn feature_len(&self) -> usize {
        self.arch.input.len()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    fn check_params(&self, params: &[f64]) -> Result<(), ModelError> {
        if params.len() != self.param_count {
            return Err(ModelError::ShapeMismatch { expected: self.param_count, actual: params.len() });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.feature_len() {
            return Err(ModelError::ShapeMismatch { expected: self.feature_len(), actual: x.len() });
        }
        Ok(())
    }

    fn forward_trace(&self, params: &[f64], x: &[f64]) -> Result<Trace, ModelError> {
        self.check_params(params)?;
        self.check_input(x)?;
        let n = self.layout.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        acts.push(x.to_vec());
        for (idx, (spec, lay)) in self.arch.layers.iter().zip(&self.layout).enumerate() {
            let input = &acts[idx];
            let weights = &params[lay.weight_offset..lay.weight_offset + lay.weight_len];
            let bias = &params[lay.bias_offset..lay.bias_offset + lay.bias_len];
            let mut arg = Vec::new();
            let (z, act) = match *spec {
                LayerSpec::Dense { inputs, outputs, activation } => {
                    let mut z = bias.to_vec();
                    for (o, zo) in z.iter_mut().enumerate() {
                        let row = &weights[o * inputs..(o + 1) * inputs];
                        *zo += row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                    }
                    debug_assert_eq!(z.len(), outputs);
                    (z, activation)
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, activation } => {
                    let (ih, iw) = (lay.input.height, lay.input.width);
                    let (oh, ow) = (lay.output.height, lay.output.width);
                    let mut z = vec![0.0; out_channels * oh * ow];
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc];
                                for ic in 0..in_channels {
                                    for ky in 0..kernel {
                                        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < ih) else {
                                            continue;
                                        };
                                        for kx in 0..kernel {
                                            let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&v| v < iw) else {
                                                continue;
                                            };
                                            acc += weights[((oc * in_channels + ic) * kernel + ky) * kernel + kx]
                                                * input[(ic * ih + iy) * iw + ix];
                                        }
                                    }
                                }
                                z[(oc * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    (z, activation)
                }
                LayerSpec::MaxPool2d { size } => {
                    let (ih, iw) = (lay.input.height, lay.input.width);
                    let (oh, ow) = (lay.output.height, lay.output.width);
                    let ch = lay.input.channels;
                    let mut z = vec![0.0; ch * oh * ow];
                    arg = vec![0; ch * oh * ow];
                    for c in 0..ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let i = (c * ih + oy * size + dy) * iw + ox * size + dx;
                                        if input[i] > best {
                                            best = input[i];
                                            best_idx = i;
                                        }
                                    }
                                }
                                let o = (c * oh + oy) * ow + ox;
                                z[o] = best;
                                arg[o] = best_idx;
                            }
                        }
                    }
                    (z, Activation::Identity)
                }
            };
            if z.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { layer: idx });
            }
            let a = match act {
                Activation::Identity => z.clone(),
                Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            };
            pre.push(z);
            argmax.push(arg);
            acts.push(a);
        }
        Ok(Trace { acts, pre, argmax })
    }

    /// Backpropagates `dlogits`, adding `scale` times the parameter gradient
    /// into `grad`. Returns the input gradient when requested.
    fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        dlogits: Vec<f64>,
        grad: &mut [f64],
        scale: f64,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut delta = dlogits;
        for idx in (0..self.layout.len()).rev() {
            let lay = &self.layout[idx];
            let spec = &self.arch.layers[idx];
            let input = &trace.acts[idx];
            let activation = match *spec {
                LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => activation,
                LayerSpec::MaxPool2d { .. } => Activation::Identity,
            };
            if activation == Activation::Relu {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[idx]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let need_input = idx > 0 || want_input;
            let weights = &params[lay.weight_offset..lay.weight_offset + lay.weight_len];
            let mut next = if need_input { vec![0.0; lay.input.len()] } else { Vec::new() };
            match *spec {
                LayerSpec::Dense { inputs, .. } => {
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let sd = scale * d;
                        let gw = &mut grad[lay.weight_offset + o * inputs..lay.weight_offset + (o + 1) * inputs];
                        for (g, &v) in gw.iter_mut().zip(input) {
                            *g += sd * v;
                        }
                        grad[lay.bias_offset + o] += sd;
                        if need_input {
                            let row = &weights[o * inputs..(o + 1) * inputs];
                            for (n, &w) in next.iter_mut().zip(row) {
                                *n += w * d;
                            }
                        }
                    }
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                    let (ih, iw) = (lay.input.height, lay.input.width);
                    let (oh, ow) = (lay.output.height, lay.output.width);
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let d = delta[(oc * oh + oy) * ow + ox];
                                if d == 0.0 {
                                    continue;
                                }
                                grad[lay.bias_offset + oc] += scale * d;
                                for ic in 0..in_channels {
                                    for ky in 0..kernel {
                                        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < ih) else {
                                            continue;
                                        };
                                        for kx in 0..kernel {
                                            let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&v| v < iw) else {
                                                continue;
                                            };
                                            let wi = ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                            let xi = (ic * ih + iy) * iw + ix;
                                            grad[lay.weight_offset + wi] += scale * d * input[xi];
                                            if need_input {
                                                next[xi] += weights[wi] * d;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                LayerSpec::MaxPool2d { .. } => {
                    if need_input {
                        for (o, &d) in delta.iter().enumerate() {
                            next[trace.argmax[idx][o]] += d;
                        }
                    }
                }
            }
            if !need_input {
                return None;
            }
            delta = next;
        }
        Some(delta)
    }

    /// Logits for one input.
    pub fn logits(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut trace = self.forward_trace(params, x)?;
        Ok(trace.acts.pop().unwrap_or_default())
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<usize, ModelError> {
        let z = self.logits(params, x)?;
        Ok(argmax(&z))
    }

    /// Loss, parameter gradient and input gradient for one sample.
    pub fn sample_gradient(&self, params: &[f64], x: &[f64], target: Target<'_>) -> Result<SampleGradient, ModelError> {
        let trace = self.forward_trace(params, x)?;
        let logits = trace.acts.last().expect("at least one layer");
        let (loss, probs, dlogits) = softmax_cross_entropy(logits, target, self.classes())?;
        let mut grad = vec![0.0; self.param_count];
        let input = self.backward(params, &trace, dlogits, &mut grad, 1.0, true).unwrap_or_default();
        Ok(SampleGradient { loss, params: grad, input, probs })
    }

    fn accumulate(&self, params: &[f64], x: &[f64], label: usize, grad: &mut [f64], scale: f64) -> Result<f64, ModelError> {
        let trace = self.forward_trace(params, x)?;
        let logits = trace.acts.last().expect("at least one layer");
        let (loss, _, dlogits) = softmax_cross_entropy(logits, Target::Class(label), self.classes())?;
        self.backward(params, &trace, dlogits, grad, scale, false);
        Ok(loss)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy: returns (loss, probabilities, d loss / d logits).
pub fn softmax_cross_entropy(logits: &[f64], target: Target<'_>, classes: usize) -> Result<(f64, Vec<f64>, Vec<f64>), ModelError> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| libm::exp(z - m)).sum();
    let lse = m + libm::log(sum);
    let probs: Vec<f64> = logits.iter().map(|&z| libm::exp(z - lse)).collect();
    match target {
        Target::Class(label) => {
            if label >= classes {
                return Err(ModelError::LabelOutOfRange { label, classes });
            }
            let loss = lse - logits[label];
            let mut d = probs.clone();
            d[label] -= 1.0;
            Ok((loss, probs, d))
        }
        Target::Soft(t) => {
            if t.len() != classes {
                return Err(ModelError::ShapeMismatch { expected: classes, actual: t.len() });
            }
            let mass: f64 = t.iter().sum();
            let loss = t.iter().zip(logits).map(|(&tk, &z)| tk * (lse - z)).sum();
            let d = probs.iter().zip(t).map(|(&p, &tk)| p * mass - tk).collect();
            Ok((loss, probs, d))
        }
    }
}

/// Flat model weights together with the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    net: Arc<Network>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(net: Arc<Network>, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != net.param_count() {
            return Err(ModelError::ShapeMismatch { expected: net.param_count(), actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteParams);
        }
        Ok(Self { net, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.net
    }

    pub fn arch(&self) -> &ModelArch {
        self.net.arch()
    }

    /// Same network, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(self.net.clone(), values)
    }
}

/// Inputs (flattened, row per sample) and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub feature_len: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, feature_len: usize) -> Result<Self, ModelError> {
        if feature_len == 0 || inputs.len() != labels.len() * feature_len {
            return Err(ModelError::ShapeMismatch { expected: labels.len() * feature_len, actual: inputs.len() });
        }
        Ok(Self { inputs, labels, feature_len })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.feature_len..(i + 1) * self.feature_len]
    }

    fn check(&self, net: &Network) -> Result<(), ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if self.feature_len != net.feature_len() {
            return Err(ModelError::ShapeMismatch { expected: net.feature_len(), actual: self.feature_len });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= net.classes()) {
            return Err(ModelError::LabelOutOfRange { label, classes: net.classes() });
        }
        Ok(())
    }
}

/// Draws initial weights: every weight and bias of a layer uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_model(arch: &ModelArch, seed: u64) -> Result<ParameterVector, ModelError> {
    let net = Arc::new(Network::new(arch.clone())?);
    let mut rng = rng::stream(seed, &[purpose::INIT]);
    let mut values = vec![0.0; net.param_count()];
    for (spec, lay) in arch.layers.iter().zip(net.layout()) {
        let fan_in = match *spec {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerSpec::MaxPool2d { .. } => continue,
        };
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let span = lay.weight_offset..lay.bias_offset + lay.bias_len;
        for v in &mut values[span] {
            *v = rng.random_range(-bound..bound);
        }
    }
    ParameterVector::new(net, values)
}

/// Mean loss over the batch and one gradient per sample.
pub fn loss_and_per_sample_gradients(params: &ParameterVector, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let net = params.network();
    batch.check(net)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let g = net.sample_gradient(params.values(), batch.sample(i), Target::Class(batch.labels[i]))?;
        loss += g.loss;
        grads.push(g.params);
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Mean loss and the gradient of the mean loss. Per-sample gradients are
/// summed left to right and then divided by the batch size, the same
/// arithmetic DP-SGD uses, so a noiseless unclipped DP step is bit-identical
/// to a plain step.
pub fn batch_gradient(params: &ParameterVector, batch: &Batch) -> Result<(f64, Vec<f64>), ModelError> {
    let net = params.network();
    batch.check(net)?;
    let mut grad = vec![0.0; net.param_count()];
    let mut scratch = vec![0.0; net.param_count()];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        scratch.iter_mut().for_each(|v| *v = 0.0);
        loss += net.accumulate(params.values(), batch.sample(i), batch.labels[i], &mut scratch, 1.0)?;
        for (g, s) in grad.iter_mut().zip(&scratch) {
            *g += s;
        }
    }
    let b = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= b);
    Ok((loss / b, grad))
}

/// Plain SGD step: `params - lr * update`.
pub fn apply_step(params: &ParameterVector, update: &[f64], lr: f64) -> Result<ParameterVector, ModelError> {
    if update.len() != params.len() {
        return Err(ModelError::ShapeMismatch { expected: params.len(), actual: update.len() });
    }
    let values = params.values().iter().zip(update).map(|(&w, &u)| w - lr * u).collect();
    params.with_values(values)
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(params: &ParameterVector, inputs: &[f64], labels: &[usize]) -> Result<f64, ModelError> {
    let net = params.network();
    let d = net.feature_len();
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if net.predict(params.values(), &inputs[i * d..(i + 1) * d])? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests;
