//! Desk-scale discrete diffusion distillation: numerics, reverse-mode
//! autodiff, masked and uniform noising processes, small residual
//! denoisers, teacher training, moment-matching distillation and exact
//! enumeration metrics.

// `!(x >= lo)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod teacher;
pub mod tensor;

pub use data::{DatasetKind, SyntheticDataset};
pub use diffusion::{DiffusionProcess, NoiseSchedule, ProcessKind};
pub use error::{Error, Result};
pub use metrics::ExactDistribution;
pub use models::{Denoiser, Generator, ModelConfig};
pub use rng::RngState;
pub use tensor::{Tensor, TokenBatch};
