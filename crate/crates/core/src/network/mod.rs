//! Encoder-decoder convolutional network built from first principles.
//!
//! Five encoder stages (two conv+batchnorm+ReLU rounds each, 3x3 kernels
//! with 1-pixel padding, then 2x2 max pooling except at the deepest stage)
//! feed five mirrored decoder stages that upsample by max-unpooling with
//! the recorded encoder pooling indices, ending in a two-channel softmax
//! classifier. Backward passes are hand-derived and verified against
//! central finite differences; training is plain SGD with classical
//! momentum at batch size 1.
//!
//! All layer arithmetic is generic over the scalar type: production
//! training and inference run at f32, gradient verification at f64.

mod checkpoint;
mod layers;
mod model;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layers::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, conv2d_backward,
    conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, maxunpool2x2,
    maxunpool2x2_backward, relu_backward, relu_forward, softmax_cross_entropy, softmax2,
    BnCache, BnGrads, BnParams, ConvGrads, ConvParams, PoolIndices, BN_EPSILON, BN_MOMENTUM,
};
pub use model::{
    DecoderBlock, EncoderBlock, ModelCache, ModelConfig, ModelGrads, ModelParams,
};
pub use tensor::{Scalar, Tensor4};
pub use train::{predict, predict_probabilities, sgd_step, train, TrainConfig, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("channel mismatch: layer expects {expected}, tensor has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("max pooling requires even spatial dims, got {h}x{w}")]
    OddSpatialDims { h: usize, w: usize },
    #[error("tensor shape {got:?} incompatible with {expected:?} for {context}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize, usize, usize),
        got: (usize, usize, usize, usize),
    },
    #[error("input {h}x{w} not divisible by {divisor} (pooling stages)")]
    IndivisibleInput { h: usize, w: usize, divisor: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training pair {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    HeterogeneousShapes {
        index: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("inference before any training step: batch-norm running statistics unset")]
    RunningStatsUnset,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
