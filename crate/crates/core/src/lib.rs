//! Small Transformer language models trained from scratch on binary addition
//! and multiplication, plus the analyses used to interrogate them:
//! interpolation/extrapolation splits, embedding-distance correlations and
//! amnesic probing.

pub mod amnesic;
pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numcheck;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autodiff::{AttentionShape, Tape, Var};
pub use error::{ArithError, Result};
pub use experiments::{ExperimentPreset, RunManifest};
pub use model::{LayerActivations, LossMask, Model, ModelConfig};
pub use rng::RngState;
pub use tasks::{Sample, SplitKind, SplitSpec, TaskSpec, Token};
pub use tensor::{Scalar, Tensor};
pub use train::{MetricsRow, TrainConfig};
