//! Hierarchical quantized autoencoders: a stack of stochastic vector-quantized
//! layers trained greedily and used as a fixed-rate lossy codec.

// `!(x > 0.0)` is the intended spelling: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Kernels index several parallel buffers by the same counter.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod layer;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod quantizer;
pub mod real;
pub mod stack;
pub mod tensor;
pub mod toylab;

pub use autodiff::{gumbel_softmax_sample, Activation, RunningNorm, Tape, Var};
pub use checkpoint::{load_stack, LayerCheckpoint, StackManifest};
pub use config::ExperimentConfig;
pub use error::{HqaError, Result};
pub use kernels::ConvGeom;
pub use layer::{
    layer_loss, HqaLayer, LayerConfig, LayerVariant, LossBreakdown, Quantization, ReconTarget,
    Regularizers, Target, TrainState,
};
pub use optim::{radam_step, LrSchedule, OptimizerState, RAdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use quantizer::{Codebook, PosteriorDistribution, TemperatureSchedule, UsageAccumulator};
pub use real::Real;
pub use stack::{
    train_greedy, DecodeMode, HqaStack, LayerPlan, ReconstructionOptions, TrainCursor, TrainEvent,
};
pub use tensor::Tensor;
