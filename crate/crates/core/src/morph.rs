//! Function-preserving network growth: deepening with identity layers,
//! widening by unit replication, and classifier expansion for new classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{fan_in_uniform, BatchNorm2d, Conv2d, Dense, Layer, LayerKind, Network, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative bound of the noise added to replicated units when widening.
pub const WIDEN_NOISE: f32 = 1e-5;

/// Default scale for classifier rows added by [`expand_output`].
pub const DEFAULT_EXPAND_SCALE: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Deepen,
    Widen,
    ExpandOutput,
}

/// Flat positions inside one trainable tensor, identified by layer id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionSet {
    pub layer_id: u32,
    /// Index into [`Layer::params`] (0 = weight, 1 = bias / beta).
    pub param: usize,
    /// Shape of the tensor when the positions were recorded.
    pub shape: Vec<usize>,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphEntry {
    /// Provenance id, unique within the network's history.
    pub id: u32,
    pub op: MorphOp,
    /// Layer index of the morph site at application time.
    pub site: usize,
    pub site_layer_id: u32,
    pub inserted_layers: Vec<u32>,
    /// Weights created with value exactly zero.
    pub zero_positions: Vec<PositionSet>,
    /// Weights created with value exactly one.
    pub identity_positions: Vec<PositionSet>,
    /// Widening: source unit of every output unit. Empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replication: Vec<usize>,
    /// Class count after an output expansion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MorphLog {
    pub entries: Vec<MorphEntry>,
}

impl MorphLog {
    pub fn deepen_entries(&self) -> impl Iterator<Item = &MorphEntry> {
        self.entries.iter().filter(|e| e.op == MorphOp::Deepen)
    }
}

/// Where to apply a morph, resolved against the network at application time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Raw layer index.
    Layer(usize),
    /// n-th convolution (0-based).
    Conv(usize),
    /// n-th dense layer (0-based).
    Dense(usize),
}

impl Site {
    pub fn resolve(self, net: &Network) -> Result<usize> {
        let nth = |want: fn(&LayerKind) -> bool, n: usize| {
            net.layers
                .iter()
                .enumerate()
                .filter(|(_, l)| want(&l.kind))
                .nth(n)
                .map(|(i, _)| i)
        };
        let found = match self {
            Site::Layer(i) => (i < net.layers.len()).then_some(i),
            Site::Conv(n) => nth(|k| matches!(k, LayerKind::Conv2d(_)), n),
            Site::Dense(n) => nth(|k| matches!(k, LayerKind::Dense(_)), n),
        };
        found.ok_or_else(|| Error::MorphPrecondition(format!("no layer at {self:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MorphDirective {
    Deepen { site: Site },
    Widen { site: Site, width: usize },
}

impl MorphDirective {
    pub fn apply(&self, net: &Network) -> Result<(Network, MorphEntry)> {
        match *self {
            MorphDirective::Deepen { site } => deepen_at(net, site.resolve(net)?),
            MorphDirective::Widen { site, width } => widen_at(net, site.resolve(net)?, width),
        }
    }
}

/// Index of the ReLU that activates the weighted layer at `site`, allowing
/// one batch-norm in between.
fn activation_of(net: &Network, site: usize) -> Result<usize> {
    let mut j = site + 1;
    if matches!(net.layers.get(j).map(|l| &l.kind), Some(LayerKind::BatchNorm2d(_))) {
        j += 1;
    }
    match net.layers.get(j).map(|l| &l.kind) {
        Some(LayerKind::Relu) => Ok(j),
        Some(_) => Err(Error::MorphPrecondition(format!(
            "layer {site} is followed by {} rather than ReLU; identity insertion would not preserve the function",
            net.layers[j].name()
        ))),
        None => Err(Error::MorphPrecondition(format!(
            "layer {site} has no activation after it"
        ))),
    }
}

/// Inserts an identity-initialized block after the activation of the conv or
/// dense layer at `site`. Conv sites get `conv(U) → batch-norm → ReLU` with
/// zero-surround kernels; dense sites get `dense(I) → ReLU`.
pub fn deepen_at(net: &Network, site: usize) -> Result<(Network, MorphEntry)> {
    let layer = net
        .layers
        .get(site)
        .ok_or_else(|| Error::MorphPrecondition(format!("no layer {site}")))?;
    let act = activation_of(net, site)?;
    let mut out = net.clone();
    let id = out.fresh_event_id();
    let mut inserted = Vec::new();
    let mut zeros = Vec::new();
    let mut ones = Vec::new();
    match &layer.kind {
        LayerKind::Conv2d(c) => {
            let k = c.kernel();
            if k % 2 == 0 || c.padding != (k - 1) / 2 {
                return Err(Error::MorphPrecondition(format!(
                    "conv {site} has kernel {k} with padding {}; need an odd kernel with size-preserving padding",
                    c.padding
                )));
            }
            let ch = c.out_channels();
            let mut w = Tensor::zeros(&[ch, ch, k, k]);
            let center = (k / 2) * k + k / 2;
            let mut id_pos = Vec::with_capacity(ch);
            for o in 0..ch {
                let p = (o * ch + o) * k * k + center;
                w.data_mut()[p] = 1.0;
                id_pos.push(p);
            }
            let conv_id = out.fresh_layer_id();
            zeros.push(PositionSet {
                layer_id: conv_id,
                param: 0,
                shape: w.shape().to_vec(),
                positions: (0..w.len()).filter(|p| id_pos.binary_search(p).is_err()).collect(),
            });
            ones.push(PositionSet {
                layer_id: conv_id,
                param: 0,
                shape: w.shape().to_vec(),
                positions: id_pos,
            });
            let block = [
                Layer {
                    id: conv_id,
                    kind: LayerKind::Conv2d(Conv2d {
                        weight: Param::new(w),
                        bias: Param::new(Tensor::zeros(&[ch])),
                        stride: 1,
                        padding: (k - 1) / 2,
                    }),
                },
                Layer {
                    id: out.fresh_layer_id(),
                    kind: LayerKind::BatchNorm2d(BatchNorm2d::identity(ch)),
                },
                Layer {
                    id: out.fresh_layer_id(),
                    kind: LayerKind::Relu,
                },
            ];
            inserted.extend(block.iter().map(|l| l.id));
            out.layers.splice(act + 1..act + 1, block);
        }
        LayerKind::Dense(d) => {
            let n = d.out_features();
            let mut w = Tensor::zeros(&[n, n]);
            let id_pos: Vec<usize> = (0..n).map(|i| i * n + i).collect();
            for &p in &id_pos {
                w.data_mut()[p] = 1.0;
            }
            let dense_id = out.fresh_layer_id();
            zeros.push(PositionSet {
                layer_id: dense_id,
                param: 0,
                shape: vec![n, n],
                positions: (0..n * n).filter(|p| p % (n + 1) != 0).collect(),
            });
            ones.push(PositionSet {
                layer_id: dense_id,
                param: 0,
                shape: vec![n, n],
                positions: id_pos,
            });
            let block = [
                Layer {
                    id: dense_id,
                    kind: LayerKind::Dense(Dense {
                        weight: Param::new(w),
                        bias: Param::new(Tensor::zeros(&[n])),
                    }),
                },
                Layer {
                    id: out.fresh_layer_id(),
                    kind: LayerKind::Relu,
                },
            ];
            inserted.extend(block.iter().map(|l| l.id));
            out.layers.splice(act + 1..act + 1, block);
        }
        _ => {
            return Err(Error::MorphPrecondition(format!(
                "layer {site} is {}, not conv2d or dense",
                layer.name()
            )))
        }
    }
    let entry = MorphEntry {
        id,
        op: MorphOp::Deepen,
        site,
        site_layer_id: layer.id,
        inserted_layers: inserted,
        zero_positions: zeros,
        identity_positions: ones,
        replication: Vec::new(),
        classes: None,
    };
    out.morph_log.entries.push(entry.clone());
    out.validate()?;
    Ok((out, entry))
}

/// Widens the conv or dense layer at `site` to `new_width` output units by
/// replicating randomly chosen existing units. The next weighted layer's
/// inputs from each replicated unit are divided by its replica count.
pub fn widen_at(net: &Network, site: usize, new_width: usize) -> Result<(Network, MorphEntry)> {
    let layer = net
        .layers
        .get(site)
        .ok_or_else(|| Error::MorphPrecondition(format!("no layer {site}")))?;
    if site == net.classifier_index() {
        return Err(Error::ForbiddenSite(
            "the output classifier cannot be widened; use expand_output for new classes".into(),
        ));
    }
    let cur = match &layer.kind {
        LayerKind::Conv2d(c) => c.out_channels(),
        LayerKind::Dense(d) => d.out_features(),
        _ => {
            return Err(Error::MorphPrecondition(format!(
                "layer {site} is {}, not conv2d or dense",
                layer.name()
            )))
        }
    };
    let noop_entry = |id| MorphEntry {
        id,
        op: MorphOp::Widen,
        site,
        site_layer_id: layer.id,
        inserted_layers: Vec::new(),
        zero_positions: Vec::new(),
        identity_positions: Vec::new(),
        replication: (0..cur).collect(),
        classes: None,
    };
    if new_width == cur {
        return Ok((net.clone(), noop_entry(net.next_event_id)));
    }
    if new_width < cur {
        return Err(Error::MorphPrecondition(format!(
            "new width {new_width} is smaller than current width {cur}"
        )));
    }
    let next = (site + 1..net.layers.len())
        .find(|&i| net.layers[i].is_weighted())
        .ok_or_else(|| Error::MorphPrecondition(format!("no weighted layer after {site}")))?;
    let shapes = net.shapes()?;

    let mut out = net.clone();
    let id = out.fresh_event_id();
    let mut rng = net.derived_rng(0x5749_4445_0000_0000 | id as u64);
    let mut map: Vec<usize> = (0..cur).collect();
    map.extend((cur..new_width).map(|_| rng.random_range(0..cur)));
    let mut counts = vec![0usize; cur];
    for &g in &map {
        counts[g] += 1;
    }

    match &mut out.layers[site].kind {
        LayerKind::Conv2d(c) => {
            let row = c.in_channels() * c.kernel() * c.kernel();
            replicate_rows(&mut c.weight, &map, row, cur, Some(&mut rng));
            replicate_rows(&mut c.bias, &map, 1, cur, None);
        }
        LayerKind::Dense(d) => {
            let row = d.in_features();
            replicate_rows(&mut d.weight, &map, row, cur, Some(&mut rng));
            replicate_rows(&mut d.bias, &map, 1, cur, None);
        }
        _ => unreachable!(),
    }
    for layer in &mut out.layers[site + 1..next] {
        if let LayerKind::BatchNorm2d(bn) = &mut layer.kind {
            replicate_rows(&mut bn.gamma, &map, 1, cur, None);
            replicate_rows(&mut bn.beta, &map, 1, cur, None);
            bn.running_mean = map.iter().map(|&g| bn.running_mean[g]).collect();
            bn.running_var = map.iter().map(|&g| bn.running_var[g]).collect();
        }
    }
    // Values per unit as seen by the next layer (spatial extent after pooling).
    let spatial: usize = shapes[next].iter().product::<usize>() / cur;
    match &mut out.layers[next].kind {
        LayerKind::Conv2d(c) => {
            let (o, k) = (c.out_channels(), c.kernel());
            split_inputs(&mut c.weight, &map, &counts, o, k * k, new_width);
        }
        LayerKind::Dense(d) => {
            let o = d.out_features();
            split_inputs(&mut d.weight, &map, &counts, o, spatial, new_width);
        }
        _ => unreachable!(),
    }
    let mut entry = noop_entry(id);
    entry.replication = map;
    out.morph_log.entries.push(entry.clone());
    out.validate()?;
    Ok((out, entry))
}

/// Rebuilds a `[units, row]` tensor so unit `j` copies unit `map[j]`. Units at
/// or beyond `cur` get multiplicative noise when `rng` is given.
fn replicate_rows(p: &mut Param, map: &[usize], row: usize, cur: usize, rng: Option<&mut ChaCha8Rng>) {
    let src = p.value.data();
    let mut data = Vec::with_capacity(map.len() * row);
    for &g in map {
        data.extend_from_slice(&src[g * row..(g + 1) * row]);
    }
    if let Some(rng) = rng {
        for v in &mut data[cur * row..] {
            *v *= 1.0 + rng.random_range(-WIDEN_NOISE..=WIDEN_NOISE);
        }
    }
    let mut shape = p.value.shape().to_vec();
    shape[0] = map.len();
    let frozen = p.frozen.as_ref().map(|m| {
        map.iter()
            .flat_map(|&g| m[g * row..(g + 1) * row].iter().copied())
            .collect()
    });
    *p = Param {
        value: Tensor::new(shape, data).expect("replicated shape"),
        frozen,
    };
}

/// Rebuilds a consumer weight `[out, units * spatial]` (row-major, unit-major
/// inputs) for widened inputs, dividing each replicated input by its count.
fn split_inputs(p: &mut Param, map: &[usize], counts: &[usize], out: usize, spatial: usize, width: usize) {
    let cur = counts.len();
    let src = p.value.data();
    let old_row = cur * spatial;
    let new_row = width * spatial;
    let mut data = vec![0.0f32; out * new_row];
    let mut frozen = p.frozen.as_ref().map(|_| vec![false; out * new_row]);
    for o in 0..out {
        for (j, &g) in map.iter().enumerate() {
            let div = counts[g] as f32;
            for s in 0..spatial {
                let from = o * old_row + g * spatial + s;
                let to = o * new_row + j * spatial + s;
                data[to] = src[from] / div;
                if let (Some(f), Some(m)) = (frozen.as_mut(), p.frozen.as_ref()) {
                    f[to] = m[from];
                }
            }
        }
    }
    let mut shape = p.value.shape().to_vec();
    if shape.len() == 4 {
        shape[1] = width;
    } else {
        shape[1] = new_row;
    }
    *p = Param {
        value: Tensor::new(shape, data).expect("split shape"),
        frozen,
    };
}

/// Adds `k_new` classifier rows initialized at `init_scale` times the
/// fan-in-scaled uniform init. Existing rows and biases are untouched.
pub fn expand_output(net: &Network, k_new: usize, init_scale: f32) -> Result<(Network, MorphEntry)> {
    if k_new == 0 {
        return Err(Error::Config("output expansion needs at least one new class".into()));
    }
    if !(init_scale >= 0.0) {
        return Err(Error::Config(format!("init scale must be >= 0, got {init_scale}")));
    }
    let mut out = net.clone();
    let id = out.fresh_event_id();
    let site = out.classifier_index();
    let mut rng = ChaCha8Rng::seed_from_u64(net.rng_seed ^ 0x4558_5041_4e44_0000 ^ id as u64);
    let site_layer_id = out.layers[site].id;
    let LayerKind::Dense(d) = &mut out.layers[site].kind else {
        return Err(Error::Composition("network must end in a dense classifier".into()));
    };
    let (k1, fin) = (d.out_features(), d.in_features());
    let fresh = fan_in_uniform(&mut rng, &[k_new, fin], fin, init_scale);
    let mut w = d.weight.value.data().to_vec();
    w.extend_from_slice(fresh.data());
    let mut b = d.bias.value.data().to_vec();
    b.resize(k1 + k_new, 0.0);
    d.weight = Param {
        value: Tensor::new(vec![k1 + k_new, fin], w)?,
        frozen: d.weight.frozen.as_ref().map(|m| {
            let mut m = m.clone();
            m.resize((k1 + k_new) * fin, false);
            m
        }),
    };
    d.bias = Param {
        value: Tensor::new(vec![k1 + k_new], b)?,
        frozen: d.bias.frozen.as_ref().map(|m| {
            let mut m = m.clone();
            m.resize(k1 + k_new, false);
            m
        }),
    };
    out.num_classes = k1 + k_new;
    let entry = MorphEntry {
        id,
        op: MorphOp::ExpandOutput,
        site,
        site_layer_id,
        inserted_layers: Vec::new(),
        zero_positions: Vec::new(),
        identity_positions: Vec::new(),
        replication: Vec::new(),
        classes: Some(k1 + k_new),
    };
    out.morph_log.entries.push(entry.clone());
    out.validate()?;
    Ok((out, entry))
}

/// Largest absolute logit difference between two networks over `probes`
/// seeded uniform inputs in `[0, 1)`, compared on the shared class positions.
pub fn verify_preservation(old: &Network, new: &Network, probes: usize, seed: u64) -> Result<f32> {
    if old.input_shape != new.input_shape {
        return Err(Error::Composition(format!(
            "input shapes differ: {:?} vs {:?}",
            old.input_shape, new.input_shape
        )));
    }
    let shared = old.num_classes.min(new.num_classes);
    let per: usize = old.input_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    let mut left = probes;
    while left > 0 {
        let n = left.min(32);
        left -= n;
        let data: Vec<f32> = (0..n * per).map(|_| rng.random::<f32>()).collect();
        let mut shape = vec![n];
        shape.extend_from_slice(&old.input_shape);
        let x = Tensor::new(shape, data)?;
        let a = old.forward(&x)?;
        let b = new.forward(&x)?;
        for s in 0..n {
            for c in 0..shared {
                worst = worst.max((a.row(s)[c] - b.row(s)[c]).abs());
            }
        }
    }
    Ok(worst)
}
