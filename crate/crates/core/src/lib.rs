//! Temporal adaptive modules for video networks.
//!
//! The crate provides a small dense-tensor autodiff engine, the two-branch
//! temporal adaptive module (importance map + video-specific aggregation
//! kernel), baseline temporal operators, a toy residual video network,
//! a synthetic motion dataset, a desk-scale trainer, and analytic
//! FLOPs/parameter accounting over symbolic architectures.

pub mod analysis;
pub mod arch;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod synth;
pub mod tam;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, TamError};
pub use params::{ParamEntry, ParamKind, ParamStore};
pub use tape::{BnState, Mode, Tape, Var};
pub use tensor::{DType, Real, Tensor};
