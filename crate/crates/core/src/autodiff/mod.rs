//! Minimal reverse-mode differentiation, parameter storage and Adam.

mod adam;
mod gradcheck;
mod graph;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamBlock, ParamStore};
