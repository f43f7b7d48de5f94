//! Binary checkpoint format.
//!
//! ```text
//! "MTCK" | u32 version | u64 header_len | JSON header | weight blob | mask blob
//! ```
//!
//! Little-endian throughout. The weight blob holds every float tensor as `f32`
//! in layer order (conv: weight, bias; batch-norm: gamma, beta, running mean,
//! running var; dense: weight, bias). The mask blob packs freeze masks LSB-first
//! for each trainable tensor the header flags as masked, in the same order,
//! padded with zero bits to a whole byte at the end.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm2d, Conv2d, Dense, Layer, LayerKind, Param};
use super::network::Network;
use crate::error::{CheckpointError, Error, Result};
use crate::morph::MorphLog;
use crate::prune::PruneEvent;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerHeader {
    Conv2d {
        id: u32,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        masked: [bool; 2],
    },
    Batchnorm2d {
        id: u32,
        channels: usize,
        eps: f32,
        momentum: f32,
        masked: [bool; 2],
    },
    Relu {
        id: u32,
    },
    Maxpool2d {
        id: u32,
        window: usize,
        stride: usize,
    },
    Flatten {
        id: u32,
    },
    Dense {
        id: u32,
        out_features: usize,
        in_features: usize,
        masked: [bool; 2],
    },
}

impl LayerHeader {
    /// Float tensor lengths stored in the weight blob, in order.
    fn tensor_lens(&self) -> Vec<usize> {
        match *self {
            LayerHeader::Conv2d {
                out_channels,
                in_channels,
                kernel,
                ..
            } => vec![out_channels * in_channels * kernel * kernel, out_channels],
            LayerHeader::Batchnorm2d { channels, .. } => vec![channels; 4],
            LayerHeader::Dense {
                out_features,
                in_features,
                ..
            } => vec![out_features * in_features, out_features],
            _ => vec![],
        }
    }

    fn masked(&self) -> [bool; 2] {
        match *self {
            LayerHeader::Conv2d { masked, .. }
            | LayerHeader::Batchnorm2d { masked, .. }
            | LayerHeader::Dense { masked, .. } => masked,
            _ => [false, false],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    num_classes: usize,
    rng_seed: u64,
    next_layer_id: u32,
    next_event_id: u32,
    layers: Vec<LayerHeader>,
    morph_log: MorphLog,
    prune_log: Vec<PruneEvent>,
    weight_bytes: usize,
    mask_bytes: usize,
}

fn masked_pair(params: &[&Param]) -> [bool; 2] {
    [params[0].frozen.is_some(), params[1].frozen.is_some()]
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    net.validate()?;
    let mut weights: Vec<u8> = Vec::new();
    let mut bits: Vec<bool> = Vec::new();
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut push = |t: &[f32]| {
        for v in t {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    };
    for layer in &net.layers {
        let params = layer.params();
        let header = match &layer.kind {
            LayerKind::Conv2d(c) => {
                push(c.weight.value.data());
                push(c.bias.value.data());
                LayerHeader::Conv2d {
                    id: layer.id,
                    out_channels: c.out_channels(),
                    in_channels: c.in_channels(),
                    kernel: c.kernel(),
                    stride: c.stride,
                    padding: c.padding,
                    masked: masked_pair(&params),
                }
            }
            LayerKind::BatchNorm2d(b) => {
                push(b.gamma.value.data());
                push(b.beta.value.data());
                push(&b.running_mean);
                push(&b.running_var);
                LayerHeader::Batchnorm2d {
                    id: layer.id,
                    channels: b.channels(),
                    eps: b.eps,
                    momentum: b.momentum,
                    masked: masked_pair(&params),
                }
            }
            LayerKind::Relu => LayerHeader::Relu { id: layer.id },
            LayerKind::MaxPool2d { window, stride } => LayerHeader::Maxpool2d {
                id: layer.id,
                window: *window,
                stride: *stride,
            },
            LayerKind::Flatten => LayerHeader::Flatten { id: layer.id },
            LayerKind::Dense(d) => {
                push(d.weight.value.data());
                push(d.bias.value.data());
                LayerHeader::Dense {
                    id: layer.id,
                    out_features: d.out_features(),
                    in_features: d.in_features(),
                    masked: masked_pair(&params),
                }
            }
        };
        for p in params {
            if let Some(m) = &p.frozen {
                bits.extend_from_slice(m);
            }
        }
        layers.push(header);
    }
    let mask = pack_bits(&bits);
    let header = Header {
        input_shape: net.input_shape.clone(),
        num_classes: net.num_classes,
        rng_seed: net.rng_seed,
        next_layer_id: net.next_layer_id,
        next_event_id: net.next_event_id,
        layers,
        morph_log: net.morph_log.clone(),
        prune_log: net.prune_log.clone(),
        weight_bytes: weights.len(),
        mask_bytes: mask.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + weights.len() + mask.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&weights);
    out.extend_from_slice(&mask);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let take = |at: usize, n: usize, what: &'static str| -> std::result::Result<&[u8], CheckpointError> {
        bytes.get(at..at + n).ok_or(CheckpointError::Truncated(what))
    };
    if take(0, 4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(take(8, 8, "header length")?.try_into().unwrap()) as usize;
    let json = take(16, header_len, "header")?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let float_count: usize = header.layers.iter().flat_map(|l| l.tensor_lens()).sum();
    if header.weight_bytes != float_count * 4 {
        return Err(CheckpointError::LengthMismatch {
            section: "weights (header)",
            expected: float_count * 4,
            found: header.weight_bytes,
        }
        .into());
    }
    let mask_bits: usize = header
        .layers
        .iter()
        .flat_map(|l| {
            let lens = l.tensor_lens();
            let m = l.masked();
            (0..2)
                .filter(move |&j| m[j])
                .map(move |j| lens[j])
                .collect::<Vec<_>>()
        })
        .sum();
    if header.mask_bytes != mask_bits.div_ceil(8) {
        return Err(CheckpointError::LengthMismatch {
            section: "masks (header)",
            expected: mask_bits.div_ceil(8),
            found: header.mask_bytes,
        }
        .into());
    }
    let body = &bytes[16 + header_len..];
    if body.len() != header.weight_bytes + header.mask_bytes {
        return Err(CheckpointError::LengthMismatch {
            section: "weight and mask blobs",
            expected: header.weight_bytes + header.mask_bytes,
            found: body.len(),
        }
        .into());
    }
    let (wblob, mblob) = body.split_at(header.weight_bytes);
    let mut floats = wblob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let bits = unpack_bits(mblob, mask_bits);
    let mut bit_at = 0usize;
    let mut next_tensor = |shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), floats.by_ref().take(n).collect()).expect("length checked")
    };
    let mut next_mask = |masked: bool, n: usize| -> Option<Vec<bool>> {
        masked.then(|| {
            let m = bits[bit_at..bit_at + n].to_vec();
            bit_at += n;
            m
        })
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let m = lh.masked();
        let layer = match *lh {
            LayerHeader::Conv2d {
                id,
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = next_tensor(&[out_channels, in_channels, kernel, kernel]);
                let b = next_tensor(&[out_channels]);
                let weight = Param { frozen: next_mask(m[0], w.len()), value: w };
                let bias = Param { frozen: next_mask(m[1], b.len()), value: b };
                Layer {
                    id,
                    kind: LayerKind::Conv2d(Conv2d { weight, bias, stride, padding }),
                }
            }
            LayerHeader::Batchnorm2d {
                id,
                channels,
                eps,
                momentum,
                ..
            } => {
                let g = next_tensor(&[channels]);
                let b = next_tensor(&[channels]);
                let running_mean = next_tensor(&[channels]).into_data();
                let running_var = next_tensor(&[channels]).into_data();
                let gamma = Param { frozen: next_mask(m[0], channels), value: g };
                let beta = Param { frozen: next_mask(m[1], channels), value: b };
                Layer {
                    id,
                    kind: LayerKind::BatchNorm2d(BatchNorm2d {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        eps,
                        momentum,
                    }),
                }
            }
            LayerHeader::Relu { id } => Layer { id, kind: LayerKind::Relu },
            LayerHeader::Maxpool2d { id, window, stride } => Layer {
                id,
                kind: LayerKind::MaxPool2d { window, stride },
            },
            LayerHeader::Flatten { id } => Layer { id, kind: LayerKind::Flatten },
            LayerHeader::Dense {
                id,
                out_features,
                in_features,
                ..
            } => {
                let w = next_tensor(&[out_features, in_features]);
                let b = next_tensor(&[out_features]);
                let weight = Param { frozen: next_mask(m[0], w.len()), value: w };
                let bias = Param { frozen: next_mask(m[1], b.len()), value: b };
                Layer { id, kind: LayerKind::Dense(Dense { weight, bias }) }
            }
        };
        layers.push(layer);
    }
    let net = Network {
        input_shape: header.input_shape,
        layers,
        num_classes: header.num_classes,
        rng_seed: header.rng_seed,
        next_layer_id: header.next_layer_id,
        next_event_id: header.next_event_id,
        morph_log: header.morph_log,
        prune_log: header.prune_log,
    };
    net.validate()?;
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(net)?;
    std::fs::write(path, bytes).map_err(Error::Io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}
