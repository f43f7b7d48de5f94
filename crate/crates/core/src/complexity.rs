//! Multiply-accumulate accounting and the staged training-complexity sum
//! `M = Σ iterations_i × MACs_i`.

use serde::{Deserialize, Serialize};

use crate::engine::{Layer, LayerKind, Network};
use crate::error::{Error, Result};

/// MACs for one sample through `layer` given its per-sample input shape.
/// Batch-norm counts one MAC per element; activations, pooling and flatten
/// count zero.
pub fn layer_mac(layer: &Layer, input_shape: &[usize]) -> Result<u64> {
    let out = layer
        .output_shape(input_shape)
        .map_err(|e| Error::Accounting(e.to_string()))?;
    Ok(match &layer.kind {
        LayerKind::Conv2d(c) => {
            (out[1] * out[2]) as u64 * (c.out_channels() * c.in_channels() * c.kernel() * c.kernel()) as u64
        }
        LayerKind::Dense(d) => (d.out_features() * d.in_features()) as u64,
        LayerKind::BatchNorm2d(_) => out.iter().product::<usize>() as u64,
        LayerKind::Relu | LayerKind::MaxPool2d { .. } | LayerKind::Flatten => 0,
    })
}

/// Like [`layer_mac`] but skipping multiplies whose weight operand is zero.
/// For batch-norm the operand is the per-channel scale `gamma / sqrt(var + eps)`.
pub fn layer_zero_aware_mac(layer: &Layer, input_shape: &[usize]) -> Result<u64> {
    let out = layer
        .output_shape(input_shape)
        .map_err(|e| Error::Accounting(e.to_string()))?;
    Ok(match &layer.kind {
        LayerKind::Conv2d(c) => (out[1] * out[2]) as u64 * c.weight.nonzero_count() as u64,
        LayerKind::Dense(d) => d.weight.nonzero_count() as u64,
        LayerKind::BatchNorm2d(bn) => {
            let sp: usize = out[1..].iter().product();
            let live = (0..bn.channels()).filter(|&c| bn.eval_affine(c).0 != 0.0).count();
            (live * sp) as u64
        }
        LayerKind::Relu | LayerKind::MaxPool2d { .. } | LayerKind::Flatten => 0,
    })
}

fn sum_layers(net: &Network, f: fn(&Layer, &[usize]) -> Result<u64>) -> Result<u64> {
    let shapes = net.shapes()?;
    net.layers
        .iter()
        .zip(&shapes)
        .map(|(l, s)| f(l, s))
        .sum()
}

/// Per-sample forward MACs of the whole network.
pub fn network_mac(net: &Network) -> Result<u64> {
    sum_layers(net, layer_mac)
}

/// Per-sample forward MACs with zero weights discounted, as a zero-checking
/// accelerator would execute them.
pub fn zero_aware_mac(net: &Network) -> Result<u64> {
    sum_layers(net, layer_zero_aware_mac)
}

/// How one optimizer step is priced in MACs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Forward plus backward cost as a multiple of the forward cost.
    pub train_multiplier: u64,
    /// Multiply by the batch size of each stage.
    pub per_sample: bool,
}

impl CostModel {
    /// Plain `iterations × MACs`.
    pub const UNIT: CostModel = CostModel {
        train_multiplier: 1,
        per_sample: false,
    };
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            train_multiplier: 3,
            per_sample: true,
        }
    }
}

/// The inputs one stage contributes to the complexity sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub iterations: u64,
    pub macs_per_forward: u64,
    pub batch_size: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageComplexity {
    pub iterations: u64,
    pub macs_per_forward: u64,
    pub product: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub stages: Vec<StageComplexity>,
    pub total: u128,
    pub baseline_total: Option<u128>,
    pub ratio: Option<f64>,
}

impl ComplexityReport {
    pub fn with_baseline(mut self, baseline: &ComplexityReport) -> Self {
        self.baseline_total = Some(baseline.total);
        self.ratio = (baseline.total > 0).then(|| self.total as f64 / baseline.total as f64);
        self
    }
}

pub fn training_complexity(stages: &[StageCost], cost: CostModel) -> Result<ComplexityReport> {
    if stages.is_empty() {
        return Err(Error::Accounting("complexity needs at least one stage".into()));
    }
    let stages: Vec<StageComplexity> = stages
        .iter()
        .map(|s| {
            let mut per_iter = s.macs_per_forward as u128 * cost.train_multiplier as u128;
            if cost.per_sample {
                per_iter *= s.batch_size as u128;
            }
            StageComplexity {
                iterations: s.iterations,
                macs_per_forward: s.macs_per_forward,
                product: s.iterations as u128 * per_iter,
            }
        })
        .collect();
    let total = stages.iter().map(|s| s.product).sum();
    Ok(ComplexityReport {
        stages,
        total,
        baseline_total: None,
        ratio: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ArchSpec, LayerSpec};

    fn one(layers: Vec<LayerSpec>, input: Vec<usize>) -> Network {
        ArchSpec { input_shape: input, layers }.build(0).unwrap()
    }

    #[test]
    fn dense_mac_is_product() {
        let net = one(vec![LayerSpec::Dense { out: 3 }], vec![4]);
        assert_eq!(layer_mac(&net.layers[0], &[4]).unwrap(), 12);
        assert_eq!(network_mac(&net).unwrap(), 12);
    }

    #[test]
    fn conv_mac_counts_all_taps() {
        let net = one(
            vec![
                LayerSpec::Conv { out: 2, kernel: 3, stride: 1, padding: Some(1) },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 2 },
            ],
            vec![1, 8, 8],
        );
        assert_eq!(layer_mac(&net.layers[0], &[1, 8, 8]).unwrap(), 1152);
        assert_eq!(network_mac(&net).unwrap(), 1152 + 2 * 128);
    }

    #[test]
    fn two_stage_sum() {
        let r = training_complexity(
            &[
                StageCost { iterations: 10, macs_per_forward: 100, batch_size: 1 },
                StageCost { iterations: 20, macs_per_forward: 200, batch_size: 1 },
            ],
            CostModel::UNIT,
        )
        .unwrap();
        assert_eq!(r.total, 5000);
    }

    #[test]
    fn empty_is_error() {
        assert!(training_complexity(&[], CostModel::UNIT).is_err());
    }

    #[test]
    fn dense_net_zero_aware_equals_full() {
        let net = one(
            vec![
                LayerSpec::Conv { out: 3, kernel: 3, stride: 1, padding: None },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 2 },
            ],
            vec![2, 5, 5],
        );
        assert_eq!(zero_aware_mac(&net).unwrap(), network_mac(&net).unwrap());
    }
}
