//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The point lies outside the region where the requested quantity is
    /// guaranteed (e.g. derivative sign analysis assumes SNR >= 1).
    #[error("region error: {0}")]
    Region(String),

    /// The caller violated an API contract (bad lengths, empty inputs, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// No strictly feasible point exists; `residual` is the best achievable
    /// constraint slack (positive means violated).
    #[error("infeasible: {detail} (residual {residual:.3e})")]
    Infeasible { residual: f64, detail: String },

    /// A numeric routine failed to make progress.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The requested computation exceeds a configured resource cap.
    #[error("resource limit: {0}")]
    Resource(String),

    /// A channel model cannot produce the requested quantity.
    #[error("model error: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, Error>;
