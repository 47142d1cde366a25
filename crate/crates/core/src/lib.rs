//! Transformer training with confidence-aware scheduled sampling.
//!
//! The crate is generic over the scalar type (`f32` or `f64`); the aliases
//! at the bottom fix it for the common cases.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autodiff::{AttentionMask, Tape, Var};
pub use error::{Error, Result};
pub use model::{DecoderOutput, DropoutMode, Forward, ModelConfig, Transformer};
pub use rng::{RngStreams, Stream};
pub use scalar::Scalar;
pub use schedule::{
    ConfidenceEstimator, DecayStrategy, GateIndex, ScheduleConfig, ScheduleMode, TokenClass, TokenSelection,
};
pub use tasks::{Batch, Dataset, Pair, SyntheticTask, TaskVariant};
pub use tensor::Tensor;
pub use eval::{corpus_bleu, evaluate, DecodeMode, EvalReport};
pub use train::{lr_at, pretrain_then_schedule, steps_to_threshold, train_step, MetricRecord, TrainConfig, TrainState};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Transformer32 = Transformer<f32>;
pub type Transformer64 = Transformer<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
