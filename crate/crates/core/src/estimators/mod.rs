//! Per-action estimates of the decision-maker's error rate.
//!
//! Two backends: a ridge-regression LinUCB model per action, and an online
//! K-nearest-neighbour average over the interaction buffer.

mod knn;
mod linucb;

pub use knn::{KnnBuffer, KnnRecord};
pub use linucb::{LinUcbArm, LinUcbState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Estimate for an arm when nothing is known about it.
pub const UNINFORMED_ESTIMATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("unknown action {0}")]
    UnknownAction(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("loss must be 0 or 1, got {0}")]
    InvalidLoss(u8),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmEstimate {
    pub action_id: String,
    /// Estimated probability of a wrong decision under this support.
    pub r_hat: f64,
    /// Exploration bonus; always zero on the KNN path.
    pub bonus: f64,
    /// Observations that contributed to the estimate.
    pub support_count: usize,
}
