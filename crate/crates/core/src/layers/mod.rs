//! Parametric and pooling layers with explicit backward passes.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod lstm;
pub mod param;
pub mod pool;

pub use batchnorm::{BatchNorm2d, BatchNormEvalOp, BatchNormTrainOp, BnCache, BnMode};
pub use conv::{conv2d, conv2d_backward, Conv2d, Conv2dOp};
pub use dense::{dense, dense_backward, Dense, DenseOp};
pub use loss::{softmax_cross_entropy, SoftmaxCrossEntropyOp};
pub use lstm::{lstm_cell, LstmCell, LstmCellOp, LstmCellParams};
pub use param::{Param, Parameterized, Slot, SlotRef};
pub use pool::{
    channel_pool, global_pool, pool2d, ChannelPoolOp, GlobalPoolOp, Pool2dOp, PoolKind, PoolWindow,
};
