//! Test-side reference implementation: a direct-loop f64 evaluator that knows
//! nothing about the engine's kernels, plus random architecture generators.
#![allow(dead_code)]

use cumnet::engine::{ArchSpec, LayerKind, LayerSpec, Mode, Network};
use cumnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub enum NLayer {
    Conv {
        w: Vec<f64>,
        b: Vec<f64>,
        out: usize,
        inn: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Bn {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Relu,
    Pool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        w: Vec<f64>,
        b: Vec<f64>,
        out: usize,
        inn: usize,
    },
}

#[derive(Clone, Debug)]
pub struct NaiveNet {
    pub input_shape: Vec<usize>,
    pub layers: Vec<NLayer>,
}

/// Multiplications performed by the naive loops, all and with a nonzero
/// weight operand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulCount {
    pub all: u64,
    pub nonzero_weight: u64,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub logits: Vec<Vec<f64>>,
    /// ReLU on/off bits and pooling winners; a change means a kink was crossed.
    pub signature: Vec<u64>,
    /// Per-layer multiply counts for one sample (first sample).
    pub muls: Vec<MulCount>,
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

impl NaiveNet {
    pub fn from_network(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d(c) => {
                    let s = c.weight.value.shape();
                    NLayer::Conv {
                        w: f64s(&c.weight.value),
                        b: f64s(&c.bias.value),
                        out: s[0],
                        inn: s[1],
                        k: s[2],
                        stride: c.stride,
                        pad: c.padding,
                    }
                }
                LayerKind::BatchNorm2d(b) => NLayer::Bn {
                    gamma: f64s(&b.gamma.value),
                    beta: f64s(&b.beta.value),
                    mean: b.running_mean.iter().map(|&v| v as f64).collect(),
                    var: b.running_var.iter().map(|&v| v as f64).collect(),
                    eps: b.eps as f64,
                },
                LayerKind::Relu => NLayer::Relu,
                LayerKind::MaxPool2d { window, stride } => NLayer::Pool {
                    window: *window,
                    stride: *stride,
                },
                LayerKind::Flatten => NLayer::Flatten,
                LayerKind::Dense(d) => {
                    let s = d.weight.value.shape();
                    NLayer::Dense {
                        w: f64s(&d.weight.value),
                        b: f64s(&d.bias.value),
                        out: s[0],
                        inn: s[1],
                    }
                }
            })
            .collect();
        NaiveNet {
            input_shape: net.input_shape.clone(),
            layers,
        }
    }

    /// Mutable access to parameter `p` of layer `l`, in engine order.
    pub fn param_mut(&mut self, l: usize, p: usize) -> &mut Vec<f64> {
        match (&mut self.layers[l], p) {
            (NLayer::Conv { w, .. }, 0) | (NLayer::Dense { w, .. }, 0) => w,
            (NLayer::Conv { b, .. }, 1) | (NLayer::Dense { b, .. }, 1) => b,
            (NLayer::Bn { gamma, .. }, 0) => gamma,
            (NLayer::Bn { beta, .. }, 1) => beta,
            _ => panic!("layer {l} has no parameter {p}"),
        }
    }

    pub fn forward(&self, xs: &[Vec<f64>], train: bool) -> Trace {
        let mut shape = self.input_shape.clone();
        let mut acts: Vec<Vec<f64>> = xs.to_vec();
        let mut signature = Vec::new();
        let mut muls = Vec::new();
        for layer in &self.layers {
            let mut count = MulCount::default();
            match layer {
                NLayer::Conv {
                    w,
                    b,
                    out,
                    inn,
                    k,
                    stride,
                    pad,
                } => {
                    let (h, wd) = (shape[1] as isize, shape[2] as isize);
                    let oh =
                        ((h + 2 * *pad as isize - *k as isize) / *stride as isize + 1) as usize;
                    let ow =
                        ((wd + 2 * *pad as isize - *k as isize) / *stride as isize + 1) as usize;
                    for (s, a) in acts.iter_mut().enumerate() {
                        let mut y = vec![0.0; out * oh * ow];
                        for o in 0..*out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut sum = b[o];
                                    for i in 0..*inn {
                                        for ky in 0..*k {
                                            for kx in 0..*k {
                                                let iy =
                                                    (oy * stride + ky) as isize - *pad as isize;
                                                let ix =
                                                    (ox * stride + kx) as isize - *pad as isize;
                                                let xv = if iy >= 0 && iy < h && ix >= 0 && ix < wd
                                                {
                                                    a[(i * h as usize + iy as usize) * wd as usize
                                                        + ix as usize]
                                                } else {
                                                    0.0
                                                };
                                                let wv = w[((o * inn + i) * k + ky) * k + kx];
                                                sum += wv * xv;
                                                if s == 0 {
                                                    count.all += 1;
                                                    count.nonzero_weight += (wv != 0.0) as u64;
                                                }
                                            }
                                        }
                                    }
                                    y[(o * oh + oy) * ow + ox] = sum;
                                }
                            }
                        }
                        *a = y;
                    }
                    shape = vec![*out, oh, ow];
                }
                NLayer::Bn {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let ch = shape[0];
                    let sp: usize = shape[1..].iter().product();
                    let (mu, v): (Vec<f64>, Vec<f64>) = if train {
                        let n = (acts.len() * sp) as f64;
                        let mu: Vec<f64> = (0..ch)
                            .map(|c| {
                                acts.iter()
                                    .map(|a| a[c * sp..(c + 1) * sp].iter().sum::<f64>())
                                    .sum::<f64>()
                                    / n
                            })
                            .collect();
                        let v = (0..ch)
                            .map(|c| {
                                acts.iter()
                                    .map(|a| {
                                        a[c * sp..(c + 1) * sp]
                                            .iter()
                                            .map(|x| (x - mu[c]).powi(2))
                                            .sum::<f64>()
                                    })
                                    .sum::<f64>()
                                    / n
                            })
                            .collect();
                        (mu, v)
                    } else {
                        (mean.clone(), var.clone())
                    };
                    for (s, a) in acts.iter_mut().enumerate() {
                        for c in 0..ch {
                            let scale = gamma[c] / (v[c] + eps).sqrt();
                            for x in &mut a[c * sp..(c + 1) * sp] {
                                *x = (*x - mu[c]) * scale + beta[c];
                                if s == 0 {
                                    count.all += 1;
                                    count.nonzero_weight += (scale != 0.0) as u64;
                                }
                            }
                        }
                    }
                }
                NLayer::Relu => {
                    for a in acts.iter_mut() {
                        for x in a.iter_mut() {
                            signature.push((*x > 0.0) as u64);
                            *x = x.max(0.0);
                        }
                    }
                }
                NLayer::Pool { window, stride } => {
                    let (c, h, wd) = (shape[0], shape[1], shape[2]);
                    let oh = (h - window) / stride + 1;
                    let ow = (wd - window) / stride + 1;
                    for a in acts.iter_mut() {
                        let mut y = vec![0.0; c * oh * ow];
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut arg = 0u64;
                                    for dy in 0..*window {
                                        for dx in 0..*window {
                                            let idx =
                                                (ch * h + oy * stride + dy) * wd + ox * stride + dx;
                                            if a[idx] > best {
                                                best = a[idx];
                                                arg = idx as u64;
                                            }
                                        }
                                    }
                                    signature.push(arg);
                                    y[(ch * oh + oy) * ow + ox] = best;
                                }
                            }
                        }
                        *a = y;
                    }
                    shape = vec![c, oh, ow];
                }
                NLayer::Flatten => shape = vec![shape.iter().product()],
                NLayer::Dense { w, b, out, inn } => {
                    for (s, a) in acts.iter_mut().enumerate() {
                        let y = (0..*out)
                            .map(|o| {
                                let mut sum = b[o];
                                for i in 0..*inn {
                                    sum += w[o * inn + i] * a[i];
                                    if s == 0 {
                                        count.all += 1;
                                        count.nonzero_weight += (w[o * inn + i] != 0.0) as u64;
                                    }
                                }
                                sum
                            })
                            .collect();
                        *a = y;
                    }
                    shape = vec![*out];
                }
            }
            muls.push(count);
        }
        Trace {
            logits: acts,
            signature,
            muls,
        }
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, xs: &[Vec<f64>], labels: &[usize], train: bool) -> (f64, Vec<u64>) {
        let t = self.forward(xs, train);
        let mut total = 0.0;
        for (z, &l) in t.logits.iter().zip(labels) {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            total += lse - z[l];
        }
        (total / labels.len() as f64, t.signature)
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch())
        .map(|i| t.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn uniform_batch(shape: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(
        full,
        (0..n * len)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
    )
    .unwrap()
}

/// Gives every batch-norm random affine parameters and running statistics so
/// eval-mode paths are non-trivial.
pub fn randomize_bn(net: &mut Network, rng: &mut ChaCha8Rng) {
    for l in &mut net.layers {
        if let LayerKind::BatchNorm2d(b) = &mut l.kind {
            for v in b.gamma.value.data_mut() {
                *v = rng.random_range(0.5f32..1.5);
            }
            for v in b.beta.value.data_mut() {
                *v = rng.random_range(-0.5f32..0.5);
            }
            for v in &mut b.running_mean {
                *v = rng.random_range(-0.3f32..0.3);
            }
            for v in &mut b.running_var {
                *v = rng.random_range(0.5f32..2.0);
            }
        }
    }
}

/// Random small ReLU CNN: 1 to 3 conv blocks (odd kernels, same padding,
/// optional batch-norm, optional pooling) then one hidden dense block and a
/// classifier.
pub fn random_cnn(rng: &mut ChaCha8Rng) -> ArchSpec {
    let in_ch = rng.random_range(1..=3usize);
    let side = rng.random_range(6..=9usize);
    let mut layers = Vec::new();
    let mut h = side;
    for _ in 0..rng.random_range(1..=3usize) {
        let k = if h >= 5 && rng.random_bool(0.4) { 5 } else { 3 };
        layers.push(LayerSpec::Conv {
            out: rng.random_range(2..=5),
            kernel: k,
            stride: 1,
            padding: None,
        });
        if rng.random_bool(0.6) {
            layers.push(LayerSpec::BatchNorm);
        }
        layers.push(LayerSpec::Relu);
        if h >= 4 && rng.random_bool(0.5) {
            layers.push(LayerSpec::MaxPool {
                window: 2,
                stride: None,
            });
            h /= 2;
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        out: rng.random_range(3..=8),
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense {
        out: rng.random_range(2..=6),
    });
    ArchSpec {
        input_shape: vec![in_ch, side, side],
        layers,
    }
}

/// Random architecture for MAC accounting, including strided and unpadded
/// convs, non-square pooling strides and dense stacks.
pub fn random_any(rng: &mut ChaCha8Rng) -> ArchSpec {
    let in_ch = rng.random_range(1..=3usize);
    let side = rng.random_range(7..=12usize);
    let mut layers = Vec::new();
    let mut h = side;
    for _ in 0..rng.random_range(0..=3usize) {
        let k = [1usize, 2, 3, 5][rng.random_range(0..4)];
        if k > h {
            break;
        }
        let stride = rng.random_range(1..=2usize);
        let padding = rng.random_range(0..=k / 2);
        layers.push(LayerSpec::Conv {
            out: rng.random_range(1..=6),
            kernel: k,
            stride,
            padding: Some(padding),
        });
        h = (h + 2 * padding - k) / stride + 1;
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::BatchNorm);
        }
        layers.push(LayerSpec::Relu);
        if h >= 3 && rng.random_bool(0.4) {
            let window = rng.random_range(2..=3usize).min(h);
            let stride = rng.random_range(1..=window);
            layers.push(LayerSpec::MaxPool {
                window,
                stride: Some(stride),
            });
            h = (h - window) / stride + 1;
        }
    }
    layers.push(LayerSpec::Flatten);
    for _ in 0..rng.random_range(0..=2usize) {
        layers.push(LayerSpec::Dense {
            out: rng.random_range(1..=10),
        });
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::BatchNorm);
        }
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense {
        out: rng.random_range(2..=10),
    });
    ArchSpec {
        input_shape: vec![in_ch, side, side],
        layers,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference check of every parameter and of the input gradient.
/// Coordinates whose perturbation flips a ReLU or pooling decision are
/// skipped since the loss is not differentiable across them.
pub fn grad_check(net: &Network, seed: u64, mode: Mode) -> f64 {
    let mut r = rng(seed);
    let n = 3;
    let x = uniform_batch(&net.input_shape, n, &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..net.num_classes)).collect();
    let (logits, cache) = match mode {
        Mode::Train => net.clone().forward_cached(&x, Mode::Train).unwrap(),
        Mode::Eval => net.forward_eval_cached(&x).unwrap(),
    };
    let back = net.backward(&cache, &logits, &labels).unwrap();
    let train = mode == Mode::Train;
    let xs = rows(&x);
    let base = NaiveNet::from_network(net);
    let h = 1e-5;
    let mut worst = 0.0f64;

    let mut rel = |analytic: &[f32], numeric: &[Option<f64>]| {
        let (mut d, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for (a, n) in analytic.iter().zip(numeric) {
            if let Some(n) = n {
                d += (*a as f64 - n).powi(2);
                a2 += (*a as f64).powi(2);
                n2 += n.powi(2);
            }
        }
        let scale = a2.sqrt().max(n2.sqrt());
        // Gradients that vanish identically (a bias ahead of a train-mode
        // batch-norm) leave only rounding noise; compare those absolutely.
        if scale > 1e-6 {
            worst = worst.max(d.sqrt() / scale);
        } else if d.sqrt() > 1e-6 {
            worst = worst.max(1.0);
        }
    };

    let (_, sig0) = base.loss(&xs, &labels, train);
    for l in 0..base.layers.len() {
        for (p, g) in back.grads.layers[l].iter().enumerate() {
            let len = g.len();
            let numeric: Vec<Option<f64>> = (0..len)
                .map(|i| {
                    let mut plus = base.clone();
                    plus.param_mut(l, p)[i] += h;
                    let mut minus = base.clone();
                    minus.param_mut(l, p)[i] -= h;
                    let (lp, sp) = plus.loss(&xs, &labels, train);
                    let (lm, sm) = minus.loss(&xs, &labels, train);
                    (sp == sig0 && sm == sig0).then(|| (lp - lm) / (2.0 * h))
                })
                .collect();
            rel(g.data(), &numeric);
        }
    }
    let numeric: Vec<Option<f64>> = (0..x.len())
        .map(|i| {
            let (s, j) = (i / x.row_len(), i % x.row_len());
            let mut plus = xs.clone();
            plus[s][j] += h;
            let mut minus = xs.clone();
            minus[s][j] -= h;
            let (lp, sp) = base.loss(&plus, &labels, train);
            let (lm, sm) = base.loss(&minus, &labels, train);
            (sp == sig0 && sm == sig0).then(|| (lp - lm) / (2.0 * h))
        })
        .collect();
    rel(back.input_grad.data(), &numeric);
    worst
}

/// Worst relative gradient error over 20 random instances of one layer kind.
pub fn check_kind(kind: GradKind) -> f64 {
    (0..20u64)
        .map(|seed| {
            let mut r = rng(seed * 7 + 1);
            let mut net = (kind.make)(&mut r).build(seed).unwrap();
            randomize_bn(&mut net, &mut r);
            grad_check(&net, seed, kind.mode)
        })
        .fold(0.0, f64::max)
}

pub fn side(r: &mut ChaCha8Rng) -> usize {
    r.random_range(4..=6)
}

#[derive(Clone, Copy)]
pub struct GradKind {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> ArchSpec,
    pub mode: Mode,
}

/// One small architecture family per layer kind.
pub const GRAD_KINDS: [GradKind; 7] = [
    GradKind {
        name: "conv",
        make: |r| ArchSpec {
            input_shape: vec![r.random_range(1..=2), side(r), side(r)],
            layers: vec![
                LayerSpec::Conv {
                    out: r.random_range(1..=3),
                    kernel: [1, 3][r.random_range(0..2)],
                    stride: r.random_range(1..=2),
                    padding: None,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 3 },
            ],
        },
        mode: Mode::Train,
    },
    GradKind {
        name: "batchnorm",
        make: |r| ArchSpec {
            input_shape: vec![2, side(r), side(r)],
            layers: vec![
                LayerSpec::Conv {
                    out: 3,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 3 },
            ],
        },
        mode: Mode::Train,
    },
    GradKind {
        name: "batchnorm eval",
        make: |r| ArchSpec {
            input_shape: vec![2, side(r), side(r)],
            layers: vec![
                LayerSpec::Conv {
                    out: 3,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 3 },
            ],
        },
        mode: Mode::Eval,
    },
    GradKind {
        name: "relu",
        make: |r| ArchSpec {
            input_shape: vec![r.random_range(2..=6)],
            layers: vec![
                LayerSpec::Dense { out: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 3 },
            ],
        },
        mode: Mode::Train,
    },
    GradKind {
        name: "maxpool",
        make: |r| ArchSpec {
            input_shape: vec![2, side(r), side(r)],
            layers: vec![
                LayerSpec::Conv {
                    out: 2,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                },
                LayerSpec::MaxPool {
                    window: 2,
                    stride: Some(r.random_range(1..=2)),
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 3 },
            ],
        },
        mode: Mode::Train,
    },
    GradKind {
        name: "dense",
        make: |r| ArchSpec {
            input_shape: vec![r.random_range(1..=3), 3, 3],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 4 },
                LayerSpec::Dense { out: 3 },
            ],
        },
        mode: Mode::Train,
    },
    GradKind {
        name: "cnn",
        make: random_cnn,
        mode: Mode::Train,
    },
];

/// Weighted layers other than the classifier.
pub fn weighted_hidden(net: &Network) -> Vec<usize> {
    let cls = net.classifier_index();
    (0..net.layers.len())
        .filter(|&i| i != cls && net.layers[i].is_weighted())
        .collect()
}

/// A random CNN with random batch-norm state and a random morphable site.
pub fn random_site(seed: u64) -> (Network, usize, ChaCha8Rng) {
    let mut r = rng(seed);
    let mut net = random_cnn(&mut r).build(seed).unwrap();
    randomize_bn(&mut net, &mut r);
    let sites = weighted_hidden(&net);
    let site = sites[r.random_range(0..sites.len())];
    (net, site, r)
}

/// Multiplies per layer as counted by the reference evaluator on one sample.
pub fn counted(net: &Network) -> Vec<MulCount> {
    let mut r = rng(0);
    let x = uniform_batch(&net.input_shape, 1, &mut r);
    NaiveNet::from_network(net).forward(&rows(&x), false).muls
}

/// Zeroes a random share of weights and batch-norm scales.
pub fn sparsify(net: &mut Network, r: &mut ChaCha8Rng) {
    for l in &mut net.layers {
        match &mut l.kind {
            LayerKind::Conv2d(c) => c.weight.value.data_mut().iter_mut().for_each(|v| {
                if r.random_bool(0.4) {
                    *v = 0.0
                }
            }),
            LayerKind::Dense(d) => d.weight.value.data_mut().iter_mut().for_each(|v| {
                if r.random_bool(0.4) {
                    *v = 0.0
                }
            }),
            LayerKind::BatchNorm2d(b) => b.gamma.value.data_mut().iter_mut().for_each(|v| {
                if r.random_bool(0.3) {
                    *v = 0.0
                }
            }),
            _ => {}
        }
    }
}
