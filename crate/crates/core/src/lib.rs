//! Multi-modal attention adapter over frozen vision-language embeddings.
//!
//! This crate is `no_std` (it needs `alloc`). It contains the tensor and
//! autodiff core, the adapter architectures, the few-shot trainer and the
//! base/new evaluation harness. File formats and the command line live in
//! the companion `mma` crate.

#![no_std]
// `!(x >= 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adapters;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod rng;
pub mod store;
pub mod tensor;
pub mod train;

pub use adapters::{AdapterKind, AdapterModel, AttentionVariant, MmaConfig, UpDownVariant};
pub use error::{ConfigError, DataError, RunError, TensorError};
pub use eval::{EvalReport, ExperimentOptions};
pub use store::{EmbeddingStore, EmbeddingView, SplitKind};
pub use tensor::{Parameter, Tensor};
pub use train::{TrainConfig, TrainOutcome};
