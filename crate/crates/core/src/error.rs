//! Error type shared by every planner stage.

use thiserror::Error;

/// Errors produced by the planner. Variants map onto process exit codes in
/// the CLI (`Infeasible` → 2, `Config` → 3, `Data`/`Io`/`Json` → 4).
#[derive(Debug, Error)]
pub enum MxError {
    /// A configuration is internally inconsistent (bad group size, unknown
    /// scheme notation, unsupported precision, instance too large, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a precondition (non-finite values, shape
    /// mismatch, malformed file contents, ...).
    #[error("data error: {0}")]
    Data(String),

    /// The memory budget cannot be met even by the cheapest assignment.
    #[error(
        "infeasible budget: {budget_bytes:.0} bytes, minimal achievable is {min_bytes:.0} bytes"
    )]
    Infeasible {
        /// Requested budget in bytes.
        budget_bytes: f64,
        /// Memory of the cheapest feasible assignment in bytes.
        min_bytes: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MxError {
    pub fn config(msg: impl Into<String>) -> Self {
        MxError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        MxError::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, MxError>;
