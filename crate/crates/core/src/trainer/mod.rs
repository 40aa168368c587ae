//! The embedding network, its training loop and gradient verification.

pub mod gradcheck;
pub mod mlp;
pub mod train;

pub use gradcheck::{gradcheck_loss, gradcheck_model, GradcheckReport};
pub use mlp::{Activation, Gradients, Layer, Mlp, MlpConfig, Trace};
pub use train::{
    evaluate_model, train, train_from, Checkpoint, EpochLog, Holdout, TrainConfig, TrainOutcome,
};
