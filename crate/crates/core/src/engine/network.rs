use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm2d, Conv2d, Dense, Layer, LayerKind, Param};
use crate::error::{Error, Result};
use crate::morph::MorphLog;
use crate::prune::PruneEvent;
use crate::tensor::Tensor;

/// Declarative layer description used to build fresh networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Defaults to size-preserving padding for odd kernels.
        #[serde(default)]
        padding: Option<usize>,
    },
    BatchNorm,
    Relu,
    MaxPool {
        window: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
    Dense {
        out: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// Fan-in scaled uniform init from `seed`. The last Dense sets `num_classes`.
    pub fn build(&self, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let kind = match *spec {
                LayerSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let in_ch = *shape.first().ok_or_else(|| {
                        Error::Composition("conv needs a [c, h, w] input".into())
                    })?;
                    let padding = padding.unwrap_or(kernel.saturating_sub(1) / 2);
                    LayerKind::Conv2d(Conv2d {
                        weight: Param::new(fan_in_uniform(
                            &mut rng,
                            &[out, in_ch, kernel, kernel],
                            in_ch * kernel * kernel,
                            1.0,
                        )),
                        bias: Param::new(Tensor::zeros(&[out])),
                        stride,
                        padding,
                    })
                }
                LayerSpec::BatchNorm => {
                    let c = *shape.first().ok_or_else(|| {
                        Error::Composition("batch-norm needs a channel dimension".into())
                    })?;
                    LayerKind::BatchNorm2d(BatchNorm2d::new(c))
                }
                LayerSpec::Relu => LayerKind::Relu,
                LayerSpec::MaxPool { window, stride } => LayerKind::MaxPool2d {
                    window,
                    stride: stride.unwrap_or(window),
                },
                LayerSpec::Flatten => LayerKind::Flatten,
                LayerSpec::Dense { out } => {
                    let fan_in: usize = shape.iter().product();
                    LayerKind::Dense(Dense {
                        weight: Param::new(fan_in_uniform(&mut rng, &[out, fan_in], fan_in, 1.0)),
                        bias: Param::new(Tensor::zeros(&[out])),
                    })
                }
            };
            let layer = Layer {
                id: i as u32,
                kind,
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        let num_classes = match layers.last().map(|l| &l.kind) {
            Some(LayerKind::Dense(d)) => d.out_features(),
            _ => {
                return Err(Error::Composition(
                    "network must end in a dense classifier".into(),
                ))
            }
        };
        let net = Network {
            input_shape: self.input_shape.clone(),
            next_layer_id: layers.len() as u32,
            layers,
            num_classes,
            rng_seed: seed,
            next_event_id: 0,
            morph_log: MorphLog::default(),
            prune_log: Vec::new(),
        };
        net.validate()?;
        Ok(net)
    }
}

/// Uniform in `±scale·sqrt(6 / fan_in)`.
pub(crate) fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, scale: f32) -> Tensor {
    let bound = scale * (6.0 / fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Per-sample input shape, `[c, h, w]` or `[d]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    pub rng_seed: u64,
    pub next_layer_id: u32,
    /// Counter for morph/prune provenance ids.
    pub next_event_id: u32,
    pub morph_log: MorphLog,
    pub prune_log: Vec<PruneEvent>,
}

impl Network {
    /// Per-sample shapes entering each layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut s = self.input_shape.clone();
        shapes.push(s.clone());
        for layer in &self.layers {
            s = layer.output_shape(&s)?;
            shapes.push(s.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Composition(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let shapes = self.shapes()?;
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Dense(d)) if d.out_features() == self.num_classes => {}
            Some(LayerKind::Dense(d)) => {
                return Err(Error::Composition(format!(
                    "classifier has {} outputs but num_classes is {}",
                    d.out_features(),
                    self.num_classes
                )))
            }
            _ => {
                return Err(Error::Composition(
                    "network must end in a dense classifier".into(),
                ))
            }
        }
        debug_assert_eq!(shapes.last().map(|s| s[0]), Some(self.num_classes));
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerKind::Conv2d(c) = &layer.kind {
                if c.bias.len() != c.out_channels() {
                    return Err(Error::Composition(format!("layer {i}: conv bias length")));
                }
            }
            if let LayerKind::Dense(d) = &layer.kind {
                if d.bias.len() != d.out_features() {
                    return Err(Error::Composition(format!("layer {i}: dense bias length")));
                }
            }
            if let LayerKind::BatchNorm2d(b) = &layer.kind {
                let c = b.channels();
                if b.beta.len() != c || b.running_mean.len() != c || b.running_var.len() != c {
                    return Err(Error::Composition(format!(
                        "layer {i}: batch-norm buffers disagree on channel count"
                    )));
                }
                if b.running_var.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Domain(format!(
                        "layer {i}: batch-norm running variance must be positive"
                    )));
                }
            }
            for p in layer.params() {
                if let Some(m) = &p.frozen {
                    if m.len() != p.len() {
                        return Err(Error::Composition(format!(
                            "layer {i}: freeze mask length {} != weight length {}",
                            m.len(),
                            p.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layer_index(&self, id: u32) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn fresh_layer_id(&mut self) -> u32 {
        let id = self.next_layer_id;
        self.next_layer_id += 1;
        id
    }

    pub fn fresh_event_id(&mut self) -> u32 {
        let id = self.next_event_id;
        self.next_event_id += 1;
        id
    }

    /// Index of the final dense classifier.
    pub fn classifier_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.len())
            .sum()
    }

    /// Count of nonzero trainable values (pruned and masked zeros excluded).
    pub fn nonzero_param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.nonzero_count())
            .sum()
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv2d(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Freezes every trainable value in the network.
    pub fn freeze_all(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.frozen = Some(vec![true; p.len()]);
            }
        }
    }

    /// RNG derived from the network seed and a caller-chosen stream tag.
    pub(crate) fn derived_rng(&self, tag: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(tag);
        rng
    }
}


impl Network {
    /// Architecture of this network, for building a same-shaped fresh copy.
    pub fn arch(&self) -> ArchSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d(c) => LayerSpec::Conv {
                    out: c.out_channels(),
                    kernel: c.kernel(),
                    stride: c.stride,
                    padding: Some(c.padding),
                },
                LayerKind::BatchNorm2d(_) => LayerSpec::BatchNorm,
                LayerKind::Relu => LayerSpec::Relu,
                LayerKind::MaxPool2d { window, stride } => LayerSpec::MaxPool {
                    window: *window,
                    stride: Some(*stride),
                },
                LayerKind::Flatten => LayerSpec::Flatten,
                LayerKind::Dense(d) => LayerSpec::Dense { out: d.out_features() },
            })
            .collect();
        ArchSpec {
            input_shape: self.input_shape.clone(),
            layers,
        }
    }
}
