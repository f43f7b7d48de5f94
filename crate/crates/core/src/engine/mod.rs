//! Deterministic CPU runtime: layers, forward/backward passes, SGD and
//! checkpoint persistence.

pub mod checkpoint;
mod forward;
mod layer;
mod network;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{argmax, softmax, softmax_cross_entropy, Backward, Cache, ChannelMask, Gradients, Mode};
pub use layer::{BatchNorm2d, Conv2d, Dense, Layer, LayerKind, Param, BN_EPSILON, BN_MOMENTUM};
pub use network::{ArchSpec, LayerSpec, Network};
pub(crate) use network::fan_in_uniform;
pub use optim::{sgd_step, Sgd, SgdConfig};
