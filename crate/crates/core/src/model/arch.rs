use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Channels x height x width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Identity,
    Relu,
}

/// One layer of a [`ModelArch`]. Dense layers flatten whatever precedes them.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    /// Non-overlapping max pooling with a square window.
    MaxPool2d { size: usize },
}

/// Layer descriptors plus input shape and class count.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModelArch {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

/// Where one layer's parameters live inside the flat vector, and the shapes
/// flowing in and out of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
    pub input: Shape,
    pub output: Shape,
}

impl ModelArch {
    /// Two-layer ReLU network used by the desk-scale experiments and the
    /// attack suite.
    pub fn desk_mlp(input: Shape, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            layers: alloc::vec![
                LayerSpec::Dense { inputs: input.len(), outputs: hidden, activation: Activation::Relu },
                LayerSpec::Dense { inputs: hidden, outputs: classes, activation: Activation::Identity },
            ],
            classes,
        }
    }

    /// The 8x8 single-channel, 32-unit, 10-class default.
    pub fn desk_default() -> Self {
        Self::desk_mlp(Shape::new(1, 8, 8), 32, 10)
    }

    /// LeNet-5 on 3x32x32 inputs. Padding 2 on the first convolution gives
    /// 83,126 parameters.
    pub fn lenet5() -> Self {
        let relu = Activation::Relu;
        Self {
            input: Shape::new(3, 32, 32),
            layers: alloc::vec![
                LayerSpec::Conv2d { in_channels: 3, out_channels: 6, kernel: 5, stride: 1, padding: 2, activation: relu },
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Conv2d { in_channels: 6, out_channels: 16, kernel: 5, stride: 1, padding: 0, activation: relu },
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Dense { inputs: 576, outputs: 120, activation: relu },
                LayerSpec::Dense { inputs: 120, outputs: 84, activation: relu },
                LayerSpec::Dense { inputs: 84, outputs: 10, activation: Activation::Identity },
            ],
            classes: 10,
        }
    }

    /// Validates the descriptor list and returns the per-layer parameter layout.
    pub fn layout(&self) -> Result<Vec<LayerLayout>, ModelError> {
        if self.input.is_empty() {
            return Err(ModelError::InvalidArch { layer: 0, reason: "empty input shape" });
        }
        if self.layers.is_empty() {
            return Err(ModelError::InvalidArch { layer: 0, reason: "no layers" });
        }
        let mut shape = self.input;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let (weight_len, bias_len, next) = match *layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if inputs != shape.len() {
                        return Err(ModelError::InvalidArch { layer: idx, reason: "dense input dimension mismatch" });
                    }
                    if outputs == 0 {
                        return Err(ModelError::InvalidArch { layer: idx, reason: "dense layer with zero outputs" });
                    }
                    (inputs * outputs, outputs, Shape::new(outputs, 1, 1))
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                    if in_channels != shape.channels {
                        return Err(ModelError::InvalidArch { layer: idx, reason: "conv input channels mismatch" });
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(ModelError::InvalidArch { layer: idx, reason: "conv with zero kernel, stride or channels" });
                    }
                    let (h, w) = (shape.height + 2 * padding, shape.width + 2 * padding);
                    if h < kernel || w < kernel {
                        return Err(ModelError::InvalidArch { layer: idx, reason: "conv kernel larger than padded input" });
                    }
                    let next = Shape::new(out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1);
                    (out_channels * in_channels * kernel * kernel, out_channels, next)
                }
                LayerSpec::MaxPool2d { size } => {
                    if size == 0 || shape.height < size || shape.width < size {
                        return Err(ModelError::InvalidArch { layer: idx, reason: "pool window larger than input" });
                    }
                    (0, 0, Shape::new(shape.channels, shape.height / size, shape.width / size))
                }
            };
            out.push(LayerLayout {
                weight_offset: offset,
                weight_len,
                bias_offset: offset + weight_len,
                bias_len,
                input: shape,
                output: next,
            });
            offset += weight_len + bias_len;
            shape = next;
        }
        if shape.len() != self.classes {
            return Err(ModelError::InvalidArch { layer: self.layers.len() - 1, reason: "final layer width differs from class count" });
        }
        Ok(out)
    }

    /// Parameter count, a pure function of the descriptor list.
    pub fn param_count(&self) -> Result<usize, ModelError> {
        Ok(self.layout()?.last().map(|l| l.bias_offset + l.bias_len).unwrap_or(0))
    }

    pub fn feature_len(&self) -> usize {
        self.input.len()
    }
}
