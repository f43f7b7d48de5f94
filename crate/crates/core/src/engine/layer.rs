use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// A trainable tensor with an optional freeze mask (`true` = held fixed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    #[serde(default)]
    pub frozen: Option<Vec<bool>>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, frozen: None }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.as_ref().is_some_and(|m| m[i])
    }

    /// Marks position `i` frozen, allocating the mask on first use.
    pub fn freeze(&mut self, i: usize) {
        let n = self.value.len();
        self.frozen.get_or_insert_with(|| vec![false; n])[i] = true;
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    pub fn nonzero_count(&self) -> usize {
        self.value.data().iter().filter(|&&v| v != 0.0).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Param,
    /// `[out_ch]`
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }
    /// Odd kernel with `(k-1)/2` padding at stride 1 keeps spatial size.
    pub fn preserves_size(&self) -> bool {
        let k = self.kernel();
        k % 2 == 1 && self.padding == (k - 1) / 2 && self.stride == 1
    }
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k || self.stride == 0 {
            return None;
        }
        Some(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    /// Batch-norm that is exactly the identity in eval mode.
    pub fn identity(channels: usize) -> Self {
        let mut bn = BatchNorm2d::new(channels);
        let g = (1.0 + bn.eps).sqrt();
        bn.gamma.value.data_mut().fill(g);
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel eval-mode `(scale, shift)` with `y = x * scale + shift`.
    pub fn eval_affine(&self, c: usize) -> (f32, f32) {
        let scale = self.gamma.value.data()[c] / (self.running_var[c] + self.eps).sqrt();
        let shift = self.beta.value.data()[c] - self.running_mean[c] * scale;
        (scale, shift)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
}

impl Dense {
    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }
    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    Dense(Dense),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Stable identity; survives insertions so logs can refer to it.
    pub id: u32,
    pub kind: LayerKind,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match &self.kind {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::BatchNorm2d(_) => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense(_) => "dense",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d(_) | LayerKind::Dense(_))
    }

    pub fn params(&self) -> Vec<&Param> {
        match &self.kind {
            LayerKind::Conv2d(c) => vec![&c.weight, &c.bias],
            LayerKind::BatchNorm2d(b) => vec![&b.gamma, &b.beta],
            LayerKind::Dense(d) => vec![&d.weight, &d.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.kind {
            LayerKind::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            LayerKind::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            LayerKind::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Composition(format!("{}: {msg}", self.name())));
        match &self.kind {
            LayerKind::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return bad(format!(
                        "expects [{}, h, w] input, got {:?}",
                        c.in_channels(),
                        input
                    ));
                }
                match c.output_hw(input[1], input[2]) {
                    Some((oh, ow)) => Ok(vec![c.out_channels(), oh, ow]),
                    None => bad(format!("kernel does not fit input {:?}", input)),
                }
            }
            LayerKind::BatchNorm2d(b) => {
                if input.is_empty() || input[0] != b.channels() {
                    return bad(format!(
                        "expects {} channels, got {:?}",
                        b.channels(),
                        input
                    ));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { window, stride } => {
                if input.len() != 3 || *window == 0 || *stride == 0 {
                    return bad(format!("expects [c, h, w] input, got {:?}", input));
                }
                if input[1] < *window || input[2] < *window {
                    return bad(format!("window {window} larger than input {:?}", input));
                }
                Ok(vec![
                    input[0],
                    (input[1] - window) / stride + 1,
                    (input[2] - window) / stride + 1,
                ])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Dense(d) => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != d.in_features() {
                    return bad(format!(
                        "expects [{}] input, got {:?}",
                        d.in_features(),
                        input
                    ));
                }
                Ok(vec![d.out_features()])
            }
        }
    }
}
