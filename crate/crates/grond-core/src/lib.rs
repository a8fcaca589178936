//! Differentiable small-CNN core: tensors, a ResNet18-style family with
//! uniformly scalable widths, an SGD training loop with epoch callbacks,
//! and a bit-exact snapshot format.

pub mod arch;
pub mod error;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod snapshot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, slice_batch, Model, ModelMeta};
pub use snapshot::{load_snapshot, save_snapshot};
pub use tensor::Tensor;
pub use train::{eval_accuracy, train, EpochCallback, EpochStats, TrainConfig};
