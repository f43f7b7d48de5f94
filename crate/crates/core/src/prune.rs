//! L1-norm filter pruning realized as zero-and-freeze, plus freezing of the
//! zero positions introduced by deepening.

use serde::{Deserialize, Serialize};

use crate::engine::{LayerKind, Network};
use crate::error::{Error, Result};
use crate::morph::MorphLog;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// Rank filters across every conv layer together.
    #[default]
    Global,
    /// Prune `⌊R·filters⌋` from each conv layer independently.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of conv filters to remove, in `[0, 1)`.
    pub ratio: f64,
    #[serde(default)]
    pub scope: PruneScope,
    /// Freeze deepening's zero positions for the following stage.
    #[serde(default)]
    pub keep_zero_mask: bool,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "pruning ratio must be in [0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FilterId {
    pub layer_id: u32,
    pub filter: usize,
}

/// Recorded in the network so later stages and reports can trace pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub id: u32,
    pub ratio: f64,
    pub scope: PruneScope,
    pub filters: Vec<FilterId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub event: PruneEvent,
    /// Per-layer freeze masks added by this prune, `(layer index, param, mask)`.
    pub masks: Vec<(usize, usize, Vec<bool>)>,
    pub nonzero_params: usize,
    pub total_params: usize,
}

/// Per-conv-layer L1 norms of each output filter (bias excluded), in layer order.
pub fn l1_filter_norms(net: &Network) -> Vec<(usize, Vec<f64>)> {
    net.layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match &l.kind {
            LayerKind::Conv2d(c) => {
                let row = c.in_channels() * c.kernel() * c.kernel();
                let norms = c
                    .weight
                    .value
                    .data()
                    .chunks(row.max(1))
                    .take(c.out_channels())
                    .map(|f| f.iter().map(|&v| (v as f64).abs()).sum())
                    .collect();
                Some((i, norms))
            }
            _ => None,
        })
        .collect()
}

/// Selected `(layer index, filter)` pairs, lowest norms first; ties go to the
/// lower `(layer, filter)` index.
pub fn select_filters(norms: &[(usize, Vec<f64>)], ratio: f64, scope: PruneScope) -> Vec<(usize, usize)> {
    let rank = |mut cands: Vec<(f64, usize, usize)>, count: usize| {
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(count);
        cands.into_iter().map(|(_, l, f)| (l, f)).collect::<Vec<_>>()
    };
    let mut picked = match scope {
        PruneScope::Global => {
            let cands: Vec<_> = norms
                .iter()
                .flat_map(|(l, ns)| ns.iter().enumerate().map(move |(f, &n)| (n, *l, f)))
                .collect();
            let count = (ratio * cands.len() as f64).floor() as usize;
            rank(cands, count)
        }
        PruneScope::PerLayer => norms
            .iter()
            .flat_map(|(l, ns)| {
                let count = (ratio * ns.len() as f64).floor() as usize;
                rank(ns.iter().enumerate().map(|(f, &n)| (n, *l, f)).collect(), count)
            })
            .collect(),
    };
    picked.sort();
    picked
}

/// Zeroes and freezes the lowest-L1 conv filters: the filter weights and
/// bias, the gamma/beta of a directly following batch-norm, and the matching
/// input-channel slices of the next conv layer. Dense layers are never pruned.
pub fn prune_filters(net: &Network, cfg: &PruneConfig) -> Result<(Network, PruneOutcome)> {
    cfg.validate()?;
    let convs = net.conv_indices();
    if convs.is_empty() {
        return Err(Error::Config("network has no conv layers to prune".into()));
    }
    let norms = l1_filter_norms(net);
    let picked = select_filters(&norms, cfg.ratio, cfg.scope);
    let mut out = net.clone();

    for (layer, filters) in &norms {
        let n = picked.iter().filter(|(l, _)| l == layer).count();
        if n > 0 && n == filters.len() {
            return Err(Error::LayerCollapse { layer: *layer });
        }
    }

    let mut touched: Vec<(usize, usize)> = Vec::new();
    for &(li, f) in &picked {
        if let LayerKind::Conv2d(c) = &mut out.layers[li].kind {
            let row = c.in_channels() * c.kernel() * c.kernel();
            for p in f * row..(f + 1) * row {
                c.weight.value.data_mut()[p] = 0.0;
                c.weight.freeze(p);
            }
            c.bias.value.data_mut()[f] = 0.0;
            c.bias.freeze(f);
            touched.extend([(li, 0), (li, 1)]);
        }
        if let Some(LayerKind::BatchNorm2d(bn)) = out.layers.get_mut(li + 1).map(|l| &mut l.kind) {
            bn.gamma.value.data_mut()[f] = 0.0;
            bn.gamma.freeze(f);
            bn.beta.value.data_mut()[f] = 0.0;
            bn.beta.freeze(f);
            touched.extend([(li + 1, 0), (li + 1, 1)]);
        }
        if let Some(next) = convs.iter().copied().find(|&j| j > li) {
            if let LayerKind::Conv2d(c) = &mut out.layers[next].kind {
                let (o, i, kk) = (c.out_channels(), c.in_channels(), c.kernel() * c.kernel());
                for oc in 0..o {
                    for p in (oc * i + f) * kk..(oc * i + f + 1) * kk {
                        c.weight.value.data_mut()[p] = 0.0;
                        c.weight.freeze(p);
                    }
                }
                touched.push((next, 0));
            }
        }
    }
    touched.sort();
    touched.dedup();

    let event = PruneEvent {
        id: out.fresh_event_id(),
        ratio: cfg.ratio,
        scope: cfg.scope,
        filters: picked
            .iter()
            .map(|&(l, f)| FilterId {
                layer_id: out.layers[l].id,
                filter: f,
            })
            .collect(),
    };
    out.prune_log.push(event.clone());
    let masks = touched
        .into_iter()
        .filter_map(|(l, p)| {
            out.layers[l].params()[p]
                .frozen
                .clone()
                .map(|m| (l, p, m))
        })
        .collect();
    let outcome = PruneOutcome {
        event,
        masks,
        nonzero_params: out.nonzero_param_count(),
        total_params: out.param_count(),
    };
    Ok((out, outcome))
}

/// Freezes every position that a deepening morph created with value zero.
/// Identity-1 positions stay trainable.
pub fn freeze_net2net_zero_mask(net: &Network, log: &MorphLog) -> Result<Network> {
    let mut deepens = log.deepen_entries().peekable();
    if deepens.peek().is_none() {
        return Err(Error::Provenance("morph log has no deepening entries".into()));
    }
    let mut out = net.clone();
    for entry in deepens {
        for set in &entry.zero_positions {
            let li = out.layer_index(set.layer_id).ok_or_else(|| {
                Error::Provenance(format!("layer id {} not found in network", set.layer_id))
            })?;
            let mut params = out.layers[li].params_mut();
            let p = params.get_mut(set.param).ok_or_else(|| {
                Error::Provenance(format!("layer id {} has no param {}", set.layer_id, set.param))
            })?;
            if p.value.shape() != set.shape.as_slice() {
                return Err(Error::Provenance(format!(
                    "layer id {} has shape {:?}, log recorded {:?}",
                    set.layer_id,
                    p.value.shape(),
                    set.shape
                )));
            }
            for &pos in &set.positions {
                p.value.data_mut()[pos] = 0.0;
                p.freeze(pos);
            }
        }
    }
    Ok(out)
}

/// Fraction of conv weights that are nonzero.
pub fn conv_nonzero_fraction(net: &Network) -> f64 {
    let (mut nz, mut total) = (0usize, 0usize);
    for l in &net.layers {
        if let LayerKind::Conv2d(c) = &l.kind {
            nz += c.weight.nonzero_count();
            total += c.weight.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        nz as f64 / total as f64
    }
}
