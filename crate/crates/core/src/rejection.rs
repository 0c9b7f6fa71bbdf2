use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Outcome of a multiple-testing procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct RejectionResult<F> {
    /// Rejected hypothesis indices, ascending.
    pub rejected: Vec<usize>,
    /// Cut-off on `stats`, when the procedure thresholds a statistic.
    pub threshold: Option<F>,
    /// Estimated FDP at the stopping point; `+∞` when nothing is rejected
    /// because no threshold was feasible.
    pub fdp_estimate: F,
    /// Per-hypothesis significance statistic (smaller is more significant).
    pub stats: Vec<F>,
}

impl<F: Scalar> RejectionResult<F> {
    pub fn n_rejected(&self) -> usize {
        self.rejected.len()
    }

    /// Indicator vector of length `m`.
    pub fn mask(&self, m: usize) -> Vec<bool> {
        let mut out = vec![false; m];
        for &i in &self.rejected {
            out[i] = true;
        }
        out
    }
}
