//! Robustness evaluation: input noise, feature-map ablation, FGSM attacks,
//! mutual inference over the staged networks, and rejection curves.

mod ensemble;
mod fgsm;

pub use ensemble::{
    decision_accuracy, detection_curve, ensemble_outputs, mutual_infer, DecisionRecord, DetectionCurve, DetectionCurves,
    DetectionPoint, EnsembleMember, EnsembleOutputs, EnsembleSpec, Outcome, Procedure,
};
pub use fgsm::{adversarial_dataset, fgsm};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::curriculum::accuracy;
use crate::data::Dataset;
use crate::engine::{argmax, ChannelMask, LayerKind, Network};
use crate::error::{Error, Result};
use crate::par;

/// Valid input range; perturbed inputs are clamped into it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputRange {
    pub lo: f32,
    pub hi: f32,
}

impl Default for InputRange {
    fn default() -> Self {
        InputRange { lo: 0.0, hi: 1.0 }
    }
}

pub const DEFAULT_SIGMAS: [f64; 7] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3];
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.0, 0.125, 0.25, 0.375, 0.5];
pub const TABLE_EPSILONS: [f32; 6] = [0.0, 0.005, 0.01, 0.02, 0.05, 0.1];
pub const ABLATION_TRIALS: usize = 5;

/// Accuracy under i.i.d. gaussian input noise of each standard deviation.
/// `sigma = 0` evaluates the clean inputs.
pub fn eval_gaussian_noise(
    net: &Network,
    ds: &Dataset,
    idx: &[usize],
    sigmas: &[f64],
    range: InputRange,
    seed: u64,
) -> Result<Vec<f64>> {
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {s}")));
    }
    let results = par::map_range(sigmas.len(), |k| -> Result<f64> {
        let sigma = sigmas[k];
        if sigma == 0.0 {
            return accuracy(net, ds, idx);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let normal = Normal::new(0.0f64, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut correct = 0usize;
        for chunk in idx.chunks(256) {
            let (mut x, labels) = ds.batch(chunk);
            for v in x.data_mut() {
                *v = ((*v as f64 + normal.sample(&mut rng)) as f32).clamp(range.lo, range.hi);
            }
            let logits = net.forward(&x)?;
            correct += labels
                .iter()
                .enumerate()
                .filter(|(s, &l)| argmax(logits.row(*s)) == l)
                .count();
        }
        Ok(correct as f64 / idx.len().max(1) as f64)
    });
    results.into_iter().collect()
}

/// Layer index whose output represents the feature maps of the conv at
/// `conv`: its ReLU when present (optionally through a batch-norm), else the
/// conv itself.
fn feature_map_layer(net: &Network, conv: usize) -> usize {
    let mut j = conv + 1;
    if matches!(net.layers.get(j).map(|l| &l.kind), Some(LayerKind::BatchNorm2d(_))) {
        j += 1;
    }
    match net.layers.get(j).map(|l| &l.kind) {
        Some(LayerKind::Relu) => j,
        _ => conv,
    }
}

/// Accuracy with `round(fraction × channels)` randomly chosen feature maps of
/// every conv layer zeroed, averaged over `trials` independent draws.
pub fn eval_ablation(
    net: &Network,
    ds: &Dataset,
    idx: &[usize],
    fractions: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Config(format!("ablation fraction must be in [0, 1], got {f}")));
    }
    let convs: Vec<(usize, usize)> = net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match &l.kind {
            LayerKind::Conv2d(c) => Some((feature_map_layer(net, i), c.out_channels())),
            _ => None,
        })
        .collect();
    let results = par::map_range(fractions.len(), |k| -> Result<f64> {
        let fraction = fractions[k];
        if fraction == 0.0 {
            return accuracy(net, ds, idx);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut total = 0.0;
        for _ in 0..trials.max(1) {
            let mut mask = ChannelMask::default();
            for &(layer, ch) in &convs {
                let drop = ((fraction * ch as f64).round() as usize).min(ch);
                let mut order: Vec<usize> = (0..ch).collect();
                order.shuffle(&mut rng);
                let mut keep = vec![true; ch];
                for &c in &order[..drop] {
                    keep[c] = false;
                }
                mask.entries.push((layer, keep));
            }
            let mut correct = 0usize;
            for chunk in idx.chunks(256) {
                let (x, labels) = ds.batch(chunk);
                let logits = net.forward_masked(&x, &mask)?;
                correct += labels
                    .iter()
                    .enumerate()
                    .filter(|(s, &l)| argmax(logits.row(*s)) == l)
                    .count();
            }
            total += correct as f64 / idx.len().max(1) as f64;
        }
        Ok(total / trials.max(1) as f64)
    });
    results.into_iter().collect()
}
