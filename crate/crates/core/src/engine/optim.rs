use super::forward::Gradients;
use super::network::Network;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<Vec<f32>>>,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd::default()
    }

    /// Velocity buffers are re-created if the network's shapes changed.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, cfg: SgdConfig) -> Result<()> {
        if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", cfg.lr)));
        }
        if grads.layers.len() != net.layers.len() {
            return Err(Error::Composition("gradients do not match network".into()));
        }
        let congruent = self.velocity.len() == net.layers.len()
            && self
                .velocity
                .iter()
                .zip(&net.layers)
                .all(|(v, l)| v.len() == l.params().len() && v.iter().zip(l.params()).all(|(a, p)| a.len() == p.len()));
        if !congruent {
            self.velocity = net
                .layers
                .iter()
                .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
                .collect();
        }
        if cfg.lr == 0.0 {
            return Ok(());
        }
        for ((layer, lgrads), lvel) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            for ((p, g), v) in layer.params_mut().into_iter().zip(lgrads).zip(lvel) {
                if g.shape() != p.value.shape() {
                    return Err(Error::Composition("gradient shape mismatch".into()));
                }
                let frozen = p.frozen.clone();
                let w = p.value.data_mut();
                for j in 0..w.len() {
                    if frozen.as_ref().is_some_and(|m| m[j]) {
                        continue;
                    }
                    v[j] = cfg.momentum * v[j] + g.data()[j] + cfg.weight_decay * w[j];
                    w[j] -= cfg.lr * v[j];
                }
            }
        }
        Ok(())
    }
}

/// One plain update without persistent momentum state.
pub fn sgd_step(net: &mut Network, grads: &Gradients, cfg: SgdConfig) -> Result<()> {
    Sgd::new().step(net, grads, cfg)
}
