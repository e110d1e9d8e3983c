//! Knowledge-update training for low-rank adapters: a composite SFT + DPO
//! objective optimized with PCGrad-coupled sharpness-aware minimization,
//! margin and curvature diagnostics, and a synthetic multi-update editing
//! benchmark.

pub mod benchmark;
pub mod curvature;
pub mod data;
pub mod error;
pub mod finite_diff;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, TensorError};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{GradientVector, ParamLayout, ParamVector, Tensor};
