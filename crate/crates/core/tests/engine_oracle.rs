mod common;

use common::{
    check_kind, random_cnn, randomize_bn, rng, rows, uniform_batch, NaiveNet, GRAD_KINDS,
};
use cumnet::engine::{checkpoint, Mode, Network};

fn max_logit_err(net: &Network, seed: u64, train: bool) -> f64 {
    let mut r = rng(seed);
    let x = uniform_batch(&net.input_shape, 4, &mut r);
    let got = if train {
        net.clone().forward_cached(&x, Mode::Train).unwrap().0
    } else {
        net.forward(&x).unwrap()
    };
    let want = NaiveNet::from_network(net).forward(&rows(&x), train).logits;
    let mut err = 0.0f64;
    for (s, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            err = err.max((got.row(s)[j] as f64 - w).abs() / (1.0 + w.abs()));
        }
    }
    err
}

#[test]
fn eval_forward_matches_reference() {
    for seed in 0..30 {
        let mut r = rng(seed);
        let mut net = random_cnn(&mut r).build(seed).unwrap();
        randomize_bn(&mut net, &mut r);
        let e = max_logit_err(&net, seed + 100, false);
        assert!(e <= 1e-5, "seed {seed}: {e}");
    }
}

#[test]
fn train_forward_matches_reference() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mut net = random_cnn(&mut r).build(seed).unwrap();
        randomize_bn(&mut net, &mut r);
        let e = max_logit_err(&net, seed + 200, true);
        assert!(e <= 1e-4, "seed {seed}: {e}");
    }
}

fn assert_kind(name: &str) {
    let kind = GRAD_KINDS.iter().find(|k| k.name == name).unwrap();
    let e = check_kind(*kind);
    assert!(e <= 1e-3, "{name}: relative error {e}");
}

#[test]
fn gradient_conv() {
    assert_kind("conv");
}

#[test]
fn gradient_batchnorm_train() {
    assert_kind("batchnorm");
}

#[test]
fn gradient_batchnorm_eval() {
    assert_kind("batchnorm eval");
}

#[test]
fn gradient_relu() {
    assert_kind("relu");
}

#[test]
fn gradient_maxpool() {
    assert_kind("maxpool");
}

#[test]
fn gradient_flatten_and_dense() {
    assert_kind("dense");
}

#[test]
fn gradient_full_block_stack() {
    assert_kind("cnn");
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut net = random_cnn(&mut r).build(seed).unwrap();
        randomize_bn(&mut net, &mut r);
        let (mut grown, _) = cumnet::morph::deepen_at(&net, 0).unwrap();
        grown = cumnet::prune::freeze_net2net_zero_mask(&grown, &grown.morph_log.clone()).unwrap();
        let path = dir.path().join(format!("n{seed}.mtck"));
        checkpoint::save_checkpoint(&grown, &path).unwrap();
        let back = checkpoint::load_checkpoint(&path).unwrap();
        assert_eq!(back, grown);
        assert_eq!(
            checkpoint::to_bytes(&back).unwrap(),
            std::fs::read(&path).unwrap()
        );
    }
}
