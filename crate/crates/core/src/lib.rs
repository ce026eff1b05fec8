//! A small convolutional-network engine: tensors, a reverse-mode tape,
//! batch-norm/dropout layers, inception/residual/dense building blocks,
//! three reference classifiers and their softmax-averaging ensemble,
//! plus the data pipeline, training loop, metrics and checkpoint format
//! around them.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;

pub use data::{AugmentConfig, DatasetSplit, LabeledImage};
pub use error::{CheckpointError, Error, Result};
pub use linalg::Real;
pub use metrics::Evaluation;
pub use models::{ArchSpec, Ensemble, InputSpec, ModelGraph, ModelKind};
pub use ops::{Padding, PoolKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{EpochRecord, TrainConfig};
