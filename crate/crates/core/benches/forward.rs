//! Forward, training-step and FGSM throughput. With the default `parallel`
//! feature each case runs on rayon's global pool and on a one-thread pool;
//! `cargo bench --no-default-features` measures the sequential build.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cumnet::engine::{ArchSpec, LayerSpec, Mode, Network};
use cumnet::par;
use cumnet::robustness::{fgsm, InputRange};
use cumnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

fn net() -> Network {
    ArchSpec {
        input_shape: vec![1, 16, 16],
        layers: vec![
            LayerSpec::Conv { out: 16, kernel: 3, stride: 1, padding: None },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: None },
            LayerSpec::Conv { out: 32, kernel: 3, stride: 1, padding: None },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: None },
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 10 },
        ],
    }
    .build(1)
    .unwrap()
}

fn batch(n: usize) -> (Tensor, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = (0..n * 256).map(|_| r.random::<f32>()).collect();
    let labels = (0..n).map(|_| r.random_range(0..10)).collect();
    (Tensor::new(vec![n, 1, 16, 16], x).unwrap(), labels)
}

/// Execution modes this build supports: the default pool, or a one-thread
/// pool entered inside each timed iteration.
fn modes() -> Vec<(&'static str, Option<ThreadPool>)> {
    if !par::is_parallel() {
        return vec![("sequential", None)];
    }
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("parallel", None), ("one_thread", Some(one))]
}

fn on<R: Send>(pool: &Option<ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn bench(c: &mut Criterion) {
    let net = net();
    let modes = modes();
    for n in [16, 64] {
        let (x, labels) = batch(n);
        let mut g = c.benchmark_group("forward");
        for (mode, pool) in &modes {
            g.bench_with_input(BenchmarkId::new(*mode, n), &x, |b, x| {
                b.iter(|| on(pool, || net.forward(black_box(x)).unwrap()))
            });
        }
        g.finish();

        let mut g = c.benchmark_group("train_step");
        for (mode, pool) in &modes {
            g.bench_with_input(BenchmarkId::new(*mode, n), &x, |b, x| {
                b.iter(|| {
                    on(pool, || {
                        let mut n2 = net.clone();
                        let (logits, cache) = n2.forward_cached(black_box(x), Mode::Train).unwrap();
                        n2.backward(&cache, &logits, &labels).unwrap()
                    })
                })
            });
        }
        g.finish();

        let mut g = c.benchmark_group("fgsm");
        for (mode, pool) in &modes {
            g.bench_with_input(BenchmarkId::new(*mode, n), &x, |b, x| {
                b.iter(|| on(pool, || fgsm(&net, black_box(x), &labels, 0.05, InputRange::default()).unwrap()))
            });
        }
        g.finish();
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench
}
criterion_main!(benches);
