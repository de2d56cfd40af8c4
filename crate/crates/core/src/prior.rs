//! Class-proportion prior for the marginal term and its update schedule.

use serde::{Deserialize, Serialize};

use crate::error::{DiamError, Result};
use crate::labels::{LabelMask, IGNORE};
use crate::numeric::{marginal, ClassPartition, ProbMap, SIMPLEX_TOL};

/// Target class proportions over the full label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorVector(Vec<f64>);

impl PriorVector {
    pub fn new(proportions: Vec<f64>) -> Result<Self> {
        let sum: f64 = proportions.iter().sum();
        if proportions.is_empty()
            || proportions.iter().any(|v| !v.is_finite() || *v < 0.0)
            || (sum - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(DiamError::Numeric(format!(
                "prior is not a probability vector: {proportions:?}"
            )));
        }
        Ok(Self(proportions))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    /// Query marginal of the current model, refreshed on schedule.
    SelfEstimated,
    /// Ground-truth query proportions (upper-bound setting).
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorPolicy {
    pub kind: PriorKind,
    pub update_iterations: Vec<usize>,
}

impl Default for PriorPolicy {
    /// Estimated at the start and refreshed once at iteration 10.
    fn default() -> Self {
        Self {
            kind: PriorKind::SelfEstimated,
            update_iterations: vec![0, 10],
        }
    }
}

impl PriorPolicy {
    pub fn new(kind: PriorKind, mut update_iterations: Vec<usize>) -> Self {
        update_iterations.sort_unstable();
        update_iterations.dedup();
        Self {
            kind,
            update_iterations,
        }
    }
}

pub fn uniform_prior(partition: &ClassPartition) -> PriorVector {
    let k = partition.n_classes();
    PriorVector(vec![1.0 / k as f64; k])
}

/// Query marginal, detached as a constant target.
pub fn estimate_prior(query_probs: &ProbMap) -> PriorVector {
    PriorVector(marginal(query_probs))
}

/// Empirical class frequencies of the query ground truth, ignores excluded.
pub fn oracle_prior(query_labels: &LabelMask, partition: &ClassPartition) -> Result<PriorVector> {
    query_labels.validate(partition)?;
    let mut counts = vec![0u64; partition.n_classes()];
    for &v in query_labels.as_slice() {
        if v != IGNORE {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(DiamError::Task(
            "oracle prior needs at least one labeled query pixel".into(),
        ));
    }
    Ok(PriorVector(
        counts.iter().map(|&c| c as f64 / total as f64).collect(),
    ))
}

pub fn maybe_update(
    policy: &PriorPolicy,
    iteration: usize,
    current_query_probs: &ProbMap,
    current: PriorVector,
) -> PriorVector {
    match policy.kind {
        PriorKind::SelfEstimated if policy.update_iterations.binary_search(&iteration).is_ok() => {
            estimate_prior(current_query_probs)
        }
        _ => current,
    }
}
