use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every probability after normalization.
///
/// Caps any single cross-entropy term at `-ln(1e-12)`, about 27.6 nats.
pub const PROB_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// Probability vector over an instance's choices, in choice order.
///
/// Always sums to one (within 1e-9) with every entry at least [`PROB_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ChoiceDistribution {
    probs: Vec<f64>,
}

impl ChoiceDistribution {
    /// Normalize non-negative weights, then apply the probability floor.
    pub fn from_probs(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("no choices".into()));
        }
        if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights must be finite and non-negative, got {bad}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        let mut probs: Vec<f64> = if total == 1.0 {
            weights
        } else {
            weights.into_iter().map(|w| w / total).collect()
        };
        apply_floor(&mut probs);
        Ok(ChoiceDistribution { probs })
    }

    /// Softmax over per-choice log-scores, then the probability floor.
    pub fn from_log_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidDistribution("no choices".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "log-scores must be finite, got {bad}"
            )));
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        Self::from_probs(weights)
    }

    /// Accept an already-normalized vector bit-for-bit, checking the invariants.
    pub fn from_normalized(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no choices".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        if let Some(bad) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < PROB_FLOOR * (1.0 - 1e-6) || **p > 1.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "entry {bad} outside [{PROB_FLOOR}, 1]"
            )));
        }
        Ok(ChoiceDistribution { probs })
    }

    pub fn uniform(arity: usize) -> Self {
        assert!(arity > 0, "uniform distribution needs at least one choice");
        ChoiceDistribution {
            probs: vec![1.0 / arity as f64; arity],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn arity(&self) -> usize {
        self.probs.len()
    }

    /// Negative log-likelihood of the observed choice, in nats.
    pub fn nll(&self, observed: usize) -> Result<f64> {
        let p = self.probs.get(observed).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "choice index {observed} out of range for arity {}",
                self.arity()
            ))
        })?;
        Ok(-p.ln())
    }
}

impl TryFrom<Vec<f64>> for ChoiceDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::from_normalized(probs)
    }
}

impl From<ChoiceDistribution> for Vec<f64> {
    fn from(d: ChoiceDistribution) -> Self {
        d.probs
    }
}

/// Raise entries below the floor to the floor and shrink the rest to keep
/// unit mass. Leaves the vector untouched when nothing is below the floor.
fn apply_floor(probs: &mut [f64]) {
    let n = probs.len();
    let mut pinned = vec![false; n];
    loop {
        let newly: Vec<usize> = (0..n).filter(|&i| !pinned[i] && probs[i] < PROB_FLOOR).collect();
        if newly.is_empty() {
            return;
        }
        for &i in &newly {
            pinned[i] = true;
            probs[i] = PROB_FLOOR;
        }
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let free_mass: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| probs[i]).sum();
        if free_mass <= 0.0 {
            // Every entry sits at the floor; only possible for huge arities.
            let u = 1.0 / n as f64;
            probs.iter_mut().for_each(|p| *p = u);
            return;
        }
        let scale = (1.0 - n_pinned as f64 * PROB_FLOOR) / free_mass;
        for i in (0..n).filter(|&i| !pinned[i]) {
            probs[i] *= scale;
        }
    }
}
