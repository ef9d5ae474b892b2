//! Small feed-forward networks trained by reverse-mode differentiation.
//!
//! The op set is deliberately closed: affine maps, ELU, dropout masks,
//! grouped softmax, quantile mixing, isotonization, and the losses used by
//! the quantile models. Every op's backward rule is checked against central
//! finite differences in the tests.

mod adam;
mod mlp;
mod tape;
mod train;

pub use adam::{AdamConfig, AdamW};
pub use mlp::{Mlp, MlpCheckpoint, MlpSpec};
pub use tape::{mix_weights, NodeId, ParamSet, Resolution, Tape};
pub use train::{
    adaptive_batch_size, train_until_stop, EarlyStopper, Objective, TrainConfig, TrainOutcome,
    DEFAULT_PATIENCE_UPDATES,
};
pub(crate) use tape::softmax_in_place;
