use super::layer::{LayerKind, Param};
use super::network::Network;
use super::ops::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch-norm; running statistics are updated.
    Train,
    /// Running statistics for batch-norm.
    Eval,
}

/// Channels to zero at the output of specific layers (ablation studies).
#[derive(Clone, Debug, Default)]
pub struct ChannelMask {
    /// `(layer index, keep flag per channel)`
    pub entries: Vec<(usize, Vec<bool>)>,
}

impl ChannelMask {
    fn for_layer(&self, i: usize) -> Option<&[bool]> {
        self.entries
            .iter()
            .find(|(l, _)| *l == i)
            .map(|(_, m)| m.as_slice())
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    /// Train-mode batch-norm: normalized input and per-channel 1/std.
    BnTrain { xhat: Vec<f32>, inv_std: Vec<f64> },
    Pool { argmax: Vec<u32> },
}

/// Activations recorded by a forward pass for use by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Cache {
    mode: Mode,
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    masks: ChannelMask,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Per-layer gradients, congruent with [`crate::engine::Layer::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| l.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect())
                .collect(),
        }
    }

    pub fn all_zero(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Clone, Debug)]
pub struct Backward {
    /// Mean cross-entropy over the batch.
    pub loss: f32,
    pub grads: Gradients,
    /// Gradient of the loss with respect to the input batch.
    pub input_grad: Tensor,
}

struct BnUpdate {
    layer: usize,
    mean: Vec<f64>,
    var_unbiased: Vec<f64>,
}

impl Network {
    /// Eval-mode forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, Mode::Eval, false, &ChannelMask::default())
            .map(|r| r.0)
    }

    /// Eval-mode forward pass with selected channels zeroed.
    pub fn forward_masked(&self, batch: &Tensor, masks: &ChannelMask) -> Result<Tensor> {
        self.run(batch, Mode::Eval, false, masks).map(|r| r.0)
    }

    /// Forward pass that records activations. Train mode also updates
    /// batch-norm running statistics.
    pub fn forward_cached(&mut self, batch: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        let (logits, cache, updates) = self.run(batch, mode, true, &ChannelMask::default())?;
        for u in updates {
            if let LayerKind::BatchNorm2d(bn) = &mut self.layers[u.layer].kind {
                let m = bn.momentum as f64;
                for c in 0..bn.channels() {
                    let rm = (1.0 - m) * bn.running_mean[c] as f64 + m * u.mean[c];
                    let rv = (1.0 - m) * bn.running_var[c] as f64 + m * u.var_unbiased[c];
                    bn.running_mean[c] = rm as f32;
                    bn.running_var[c] = (rv as f32).max(f32::MIN_POSITIVE);
                }
            }
        }
        Ok((logits, cache.expect("cache requested")))
    }

    /// Eval-mode forward pass with a cache (no state change).
    pub fn forward_eval_cached(&self, batch: &Tensor) -> Result<(Tensor, Cache)> {
        let (logits, cache, _) = self.run(batch, Mode::Eval, true, &ChannelMask::default())?;
        Ok((logits, cache.expect("cache requested")))
    }

    fn check_input(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::Composition(format!(
                "batch shape {:?} does not match input shape {:?}",
                shape, self.input_shape
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Composition("empty batch".into()));
        }
        Ok(shape[0])
    }

    fn run(
        &self,
        batch: &Tensor,
        mode: Mode,
        keep: bool,
        masks: &ChannelMask,
    ) -> Result<(Tensor, Option<Cache>, Vec<BnUpdate>)> {
        let n = self.check_input(batch)?;
        let shapes = self.shapes()?;
        let mut inputs = Vec::new();
        let mut aux = Vec::new();
        let mut updates = Vec::new();
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = &shapes[i];
            let out_shape = &shapes[i + 1];
            let mut full = vec![n];
            full.extend_from_slice(out_shape);
            let (y, a) = match &layer.kind {
                LayerKind::Conv2d(c) => {
                    let g = conv_geom(c, in_shape, out_shape);
                    let y = ops::conv2d_forward(
                        x.data(),
                        n,
                        g,
                        c.weight.value.data(),
                        c.bias.value.data(),
                    );
                    (y, Aux::None)
                }
                LayerKind::BatchNorm2d(bn) => {
                    let ch = bn.channels();
                    let sp: usize = in_shape[1..].iter().product();
                    let xd = x.data();
                    let mut y = vec![0.0f32; xd.len()];
                    match mode {
                        Mode::Eval => {
                            for c in 0..ch {
                                let (scale, _) = bn.eval_affine(c);
                                let mean = bn.running_mean[c];
                                let beta = bn.beta.value.data()[c];
                                for s in 0..n {
                                    let base = (s * ch + c) * sp;
                                    for j in base..base + sp {
                                        y[j] = (xd[j] - mean) * scale + beta;
                                    }
                                }
                            }
                            (y, Aux::None)
                        }
                        Mode::Train => {
                            let count = (n * sp) as f64;
                            let mut xhat = vec![0.0f32; xd.len()];
                            let mut inv_std = vec![0.0f64; ch];
                            let mut means = vec![0.0f64; ch];
                            let mut vars = vec![0.0f64; ch];
                            for c in 0..ch {
                                let mut sum = 0.0f64;
                                for s in 0..n {
                                    let base = (s * ch + c) * sp;
                                    sum += xd[base..base + sp].iter().map(|&v| v as f64).sum::<f64>();
                                }
                                let mean = sum / count;
                                let mut sq = 0.0f64;
                                for s in 0..n {
                                    let base = (s * ch + c) * sp;
                                    sq += xd[base..base + sp]
                                        .iter()
                                        .map(|&v| (v as f64 - mean).powi(2))
                                        .sum::<f64>();
                                }
                                let var = sq / count;
                                let istd = 1.0 / (var + bn.eps as f64).sqrt();
                                let gamma = bn.gamma.value.data()[c] as f64;
                                let beta = bn.beta.value.data()[c] as f64;
                                for s in 0..n {
                                    let base = (s * ch + c) * sp;
                                    for j in base..base + sp {
                                        let h = (xd[j] as f64 - mean) * istd;
                                        xhat[j] = h as f32;
                                        y[j] = (gamma * h + beta) as f32;
                                    }
                                }
                                inv_std[c] = istd;
                                means[c] = mean;
                                vars[c] = if count > 1.0 { sq / (count - 1.0) } else { var };
                            }
                            updates.push(BnUpdate {
                                layer: i,
                                mean: means,
                                var_unbiased: vars,
                            });
                            (y, Aux::BnTrain { xhat, inv_std })
                        }
                    }
                }
                LayerKind::Relu => (x.data().iter().map(|&v| v.max(0.0)).collect(), Aux::None),
                LayerKind::MaxPool2d { window, stride } => {
                    let (y, argmax) = ops::maxpool_forward(
                        x.data(),
                        n,
                        in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        *window,
                        *stride,
                    );
                    (y, Aux::Pool { argmax })
                }
                LayerKind::Flatten => (x.data().to_vec(), Aux::None),
                LayerKind::Dense(d) => {
                    let y = ops::dense_forward(
                        x.data(),
                        n,
                        d.in_features(),
                        d.out_features(),
                        d.weight.value.data(),
                        d.bias.value.data(),
                    );
                    (y, Aux::None)
                }
            };
            let mut y = Tensor::new(full, y)?;
            if let Some(keep_flags) = masks.for_layer(i) {
                apply_channel_mask(&mut y, keep_flags);
            }
            if !y.all_finite() {
                return Err(Error::NonFinite {
                    index: i,
                    kind: layer.name(),
                });
            }
            if keep {
                inputs.push(std::mem::replace(&mut x, y));
                aux.push(a);
            } else {
                x = y;
            }
        }
        let cache = keep.then(|| Cache {
            mode,
            inputs,
            aux,
            masks: masks.clone(),
        });
        Ok((x, cache, updates))
    }

    /// Mean softmax cross-entropy and gradients of every trainable value.
    /// Frozen positions receive exactly zero gradient.
    pub fn backward(&self, cache: &Cache, logits: &Tensor, labels: &[usize]) -> Result<Backward> {
        let n = logits.batch();
        if labels.len() != n {
            return Err(Error::Composition(format!(
                "{} labels for a batch of {}",
                labels.len(),
                n
            )));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Composition("cache does not match network".into()));
        }
        let (loss, dlogits) = softmax_cross_entropy(logits, labels, self.num_classes)?;
        let shapes = self.shapes()?;
        let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut dy = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            if let Some(keep_flags) = cache.masks.for_layer(i) {
                apply_channel_mask(&mut dy, keep_flags);
            }
            let in_shape = &shapes[i];
            let out_shape = &shapes[i + 1];
            let dx: Vec<f32> = match (&layer.kind, &cache.aux[i]) {
                (LayerKind::Conv2d(c), _) => {
                    let g = conv_geom(c, in_shape, out_shape);
                    let (dw, db, dx) =
                        ops::conv2d_backward(x.data(), dy.data(), n, g, c.weight.value.data());
                    grads[i] = vec![masked(&c.weight, dw), masked(&c.bias, db)];
                    dx
                }
                (LayerKind::BatchNorm2d(bn), aux) => {
                    let ch = bn.channels();
                    let sp: usize = in_shape[1..].iter().product();
                    let dyd = dy.data();
                    let mut dx = vec![0.0f32; dyd.len()];
                    let mut dgamma = vec![0.0f32; ch];
                    let mut dbeta = vec![0.0f32; ch];
                    match aux {
                        Aux::BnTrain { xhat, inv_std } => {
                            let count = (n * sp) as f64;
                            for c in 0..ch {
                                let gamma = bn.gamma.value.data()[c] as f64;
                                let (mut sdy, mut sdyh) = (0.0f64, 0.0f64);
                                for s in 0..n {
                                    let base = (s * ch + c) * sp;
                                    for j in base..base + sp {
                                        sdy += dyd[j] as f64;
                                        sdyh += dyd[j] as f64 * xhat[j] as f64;
                                    }
                                }
                                dgamma[c] = sdyh as f32;
                                dbeta[c] = sdy as f32;
                                let k = gamma * inv_std[c] / count;
                                for s in 0..n {
                                    let base = (s * ch + c) * sp;
                                    for j in base..base + sp {
                                        let v = count * dyd[j] as f64 - sdy - xhat[j] as f64 * sdyh;
                                        dx[j] = (k * v) as f32;
                                    }
                                }
                            }
                        }
                        _ => {
                            let xd = x.data();
                            for c in 0..ch {
                                let (scale, _) = bn.eval_affine(c);
                                let istd = 1.0 / ((bn.running_var[c] + bn.eps) as f64).sqrt();
                                let mean = bn.running_mean[c] as f64;
                                let (mut sdy, mut sdyh) = (0.0f64, 0.0f64);
                                for s in 0..n {
                                    let base = (s * ch + c) * sp;
                                    for j in base..base + sp {
                                        sdy += dyd[j] as f64;
                                        sdyh += dyd[j] as f64 * (xd[j] as f64 - mean) * istd;
                                        dx[j] = dyd[j] * scale;
                                    }
                                }
                                dgamma[c] = sdyh as f32;
                                dbeta[c] = sdy as f32;
                            }
                        }
                    }
                    grads[i] = vec![masked(&bn.gamma, dgamma), masked(&bn.beta, dbeta)];
                    dx
                }
                (LayerKind::Relu, _) => x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                (LayerKind::MaxPool2d { .. }, Aux::Pool { argmax }) => {
                    let mut dx = vec![0.0f32; x.len()];
                    for (&src, &g) in argmax.iter().zip(dy.data()) {
                        dx[src as usize] += g;
                    }
                    dx
                }
                (LayerKind::MaxPool2d { .. }, _) => {
                    return Err(Error::Composition("pool cache missing".into()))
                }
                (LayerKind::Flatten, _) => dy.data().to_vec(),
                (LayerKind::Dense(d), _) => {
                    let (dw, db, dx) = ops::dense_backward(
                        x.data(),
                        dy.data(),
                        n,
                        d.in_features(),
                        d.out_features(),
                        d.weight.value.data(),
                    );
                    grads[i] = vec![masked(&d.weight, dw), masked(&d.bias, db)];
                    dx
                }
            };
            dy = Tensor::new(x.shape().to_vec(), dx)?;
        }
        Ok(Backward {
            loss,
            grads: Gradients { layers: grads },
            input_grad: dy,
        })
    }
}

fn conv_geom(c: &super::layer::Conv2d, in_shape: &[usize], out_shape: &[usize]) -> ConvGeom {
    ConvGeom {
        in_ch: in_shape[0],
        out_ch: out_shape[0],
        h: in_shape[1],
        w: in_shape[2],
        k: c.kernel(),
        stride: c.stride,
        pad: c.padding,
        oh: out_shape[1],
        ow: out_shape[2],
    }
}

fn masked(p: &Param, mut g: Vec<f32>) -> Tensor {
    if let Some(m) = &p.frozen {
        for (v, &f) in g.iter_mut().zip(m) {
            if f {
                *v = 0.0;
            }
        }
    }
    Tensor::new(p.value.shape().to_vec(), g).expect("gradient congruent with weight")
}

fn apply_channel_mask(t: &mut Tensor, keep: &[bool]) {
    let n = t.batch();
    let ch = keep.len();
    let sp = t.row_len() / ch.max(1);
    let data = t.data_mut();
    for s in 0..n {
        for (c, &k) in keep.iter().enumerate() {
            if !k {
                let base = (s * ch + c) * sp;
                data[base..base + sp].fill(0.0);
            }
        }
    }
}

/// Softmax probabilities of one logit row, computed in `f64`.
pub fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], classes: usize) -> Result<(f32, Tensor)> {
    let n = logits.batch();
    let k = logits.row_len();
    if k != classes {
        return Err(Error::Composition(format!(
            "logits have {k} classes, expected {classes}"
        )));
    }
    let mut grad = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Domain(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let p = softmax(logits.row(s));
        loss -= p[label].max(f64::MIN_POSITIVE).ln();
        for j in 0..k {
            let t = if j == label { 1.0 } else { 0.0 };
            grad[s * k + j] = ((p[j] - t) / n as f64) as f32;
        }
    }
    Ok((
        (loss / n as f64) as f32,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}
