//! Attention-free residual MLP networks in 64-bit floats.

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{mean_preserving_rotation, Activation, Block, BlockParam, Gradients, ModelConfig, ParamKey, TinyModel, TrainableMask};
pub use optim::{sgd_nesterov_step, LossKind, TrainRecipe, Velocity};
pub use train::{train_masked, StepBatch};
