//! Minimal neural-network plumbing on top of candle tensors: seeded
//! parameter storage, a handful of layers, first-order optimizers and
//! checkpoint files.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm2d, Conv2d, Init, Upsample2x};
pub use optim::{cosine_lr, Optimizer, OptimizerKind};
pub use params::ParamStore;
