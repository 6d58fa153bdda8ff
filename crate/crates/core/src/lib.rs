//! Mixed-precision MoE quantization planner.
//!
//! The crate models the full co-design loop on a synthetic
//! mixture-of-experts block: calibrate per-linear-block quantization
//! sensitivity, derive per-expert GEMM shapes from routing statistics, cost
//! tile configurations with a roofline-style hardware model, solve the joint
//! scheme/tile allocation under a weight-memory budget, and validate the
//! resulting mixed-precision kernel plan with a deterministic multi-SM
//! scheduler and simulator.

pub mod alloc;
pub mod cost;
pub mod error;
pub mod kernel_plan;
pub mod matrix;
pub mod moe;
pub mod pipeline;
pub mod quant;
pub mod sensitivity;
pub mod tensor_io;

pub use error::{MxError, Result};
