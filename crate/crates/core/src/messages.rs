//! Everything that crosses the agent/server boundary.
//!
//! Agents only ever send their active arm sets and per-arm local
//! estimates. Expected features, context distributions, realized contexts
//! and raw rewards have no representation here.

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateEntry {
    pub arm: usize,
    pub theta_hat: Vec<f64>,
    pub pulls: u64,
}

/// Agent -> server: local estimates after an exploration step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalEstimateUpload {
    pub agent: usize,
    pub phase: usize,
    pub estimates: Vec<EstimateEntry>,
}

/// Agent -> server: the arms still active after elimination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveSetUpload {
    pub agent: usize,
    pub phase: usize,
    pub arms: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub arm: usize,
    pub theta_hat: Vec<f64>,
    /// Row-major `d x d`.
    pub v: Vec<f64>,
}

impl ModelEntry {
    pub fn new(arm: usize, theta_hat: &Vector, v: &Matrix) -> Self {
        let d = theta_hat.len();
        ModelEntry {
            arm,
            theta_hat: theta_hat.iter().copied().collect(),
            v: (0..d * d).map(|k| v[(k / d, k % d)]).collect(),
        }
    }

    pub fn theta_hat(&self) -> Vector {
        Vector::from_vec(self.theta_hat.clone())
    }

    pub fn v(&self) -> Matrix {
        let d = self.theta_hat.len();
        Matrix::from_row_slice(d, d, &self.v)
    }
}

/// Server -> every agent: the global per-arm models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalBroadcast {
    pub phase: usize,
    pub models: Vec<ModelEntry>,
}

/// Server -> one agent: pull counts for its active arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationMessage {
    pub agent: usize,
    pub phase: usize,
    pub counts: Vec<(usize, u64)>,
}

/// Any protocol message, for metering.
#[derive(Clone, Copy, Debug)]
pub enum Message<'a> {
    LocalEstimates(&'a LocalEstimateUpload),
    ActiveSet(&'a ActiveSetUpload),
    Broadcast(&'a GlobalBroadcast),
    Allocation(&'a AllocationMessage),
}
