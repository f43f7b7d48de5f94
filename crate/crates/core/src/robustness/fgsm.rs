use super::InputRange;
use crate::data::Dataset;
use crate::engine::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fast gradient sign step `x' = clamp(x + eps·sign(∇ₓ loss))` against `net`
/// in eval mode. `sign(0) = 0`.
pub fn fgsm(net: &Network, batch: &Tensor, labels: &[usize], eps: f32, range: InputRange) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("attack strength must be >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(batch.clone());
    }
    let (logits, cache) = net.forward_eval_cached(batch)?;
    let grad = net.backward(&cache, &logits, labels)?.input_grad;
    let data = batch
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            step_within(x, eps * s, eps).clamp(range.lo, range.hi)
        })
        .collect();
    Tensor::new(batch.shape().to_vec(), data)
}

/// `x + d`, pulled back toward `x` by an ulp where rounding would make the
/// step exceed `eps`.
fn step_within(x: f32, d: f32, eps: f32) -> f32 {
    let mut y = x + d;
    while (y - x).abs() > eps {
        y = if y > x { y.next_down() } else { y.next_up() };
    }
    y
}

/// Adversarial copies of the selected samples, crafted against `attacked`.
pub fn adversarial_dataset(
    attacked: &Network,
    ds: &Dataset,
    idx: &[usize],
    eps: f32,
    range: InputRange,
) -> Result<Dataset> {
    let mut data = Vec::with_capacity(idx.len() * ds.sample_len());
    let mut labels = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(128) {
        let (x, l) = ds.batch(chunk);
        let adv = fgsm(attacked, &x, &l, eps, range)?;
        data.extend_from_slice(adv.data());
        labels.extend(l);
    }
    Dataset::new(ds.sample_shape.clone(), data, labels, ds.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ArchSpec, LayerKind, LayerSpec};

    #[test]
    fn zero_eps_is_identity() {
        let net = ArchSpec { input_shape: vec![3], layers: vec![LayerSpec::Dense { out: 2 }] }
            .build(1)
            .unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        assert_eq!(fgsm(&net, &x, &[1], 0.0, InputRange::default()).unwrap(), x);
    }

    #[test]
    fn logistic_closed_form() {
        // Two-logit model z = (0, w·x + b): softmax CE with label 0 has
        // ∂L/∂x = σ(w·x + b)·w, so the step moves along sign(w).
        let mut net = ArchSpec { input_shape: vec![3], layers: vec![LayerSpec::Dense { out: 2 }] }
            .build(1)
            .unwrap();
        let w = [0.5f32, -2.0, 0.0];
        if let LayerKind::Dense(d) = &mut net.layers[0].kind {
            d.weight.value.data_mut().copy_from_slice(&[0.0, 0.0, 0.0, w[0], w[1], w[2]]);
            d.bias.value.data_mut().copy_from_slice(&[0.0, 0.25]);
        }
        let x = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let adv = fgsm(&net, &x, &[0], 0.1, InputRange::default()).unwrap();
        // 0.5 + 0.1 rounds to a point 0.1000000015 away, so the step lands one ulp short.
        let a = adv.data();
        assert_eq!(a[0], (0.5f32 + 0.1).next_down());
        assert!(a[0] - 0.5 <= 0.1);
        assert_eq!(a[1], 0.5f32 - 0.1);
        assert_eq!(a[2], 0.5);
    }
}
