//! A small f64 neural-network engine: tensors, a fixed set of layer kinds
//! with hand-written backward passes, Adam, and binary checkpoints.

mod checkpoint;
mod gradcheck;
mod layers;
pub mod loss;
mod model;
mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, relative_error, GradcheckReport, GRADCHECK_MAX_PARAMS, GRADCHECK_STEP};
pub use layers::{Layer, LayerKind, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
#[cfg(test)]
pub(crate) use layers::softplus;
pub use model::{Mode, Model};
pub use optim::{adam_step, AdamState, TrainConfig, ADAM_EPS};
pub use tensor::{Param, Tensor};
