use std::f64::consts::LN_2;

use crate::decoder::ChoiceDistribution;
use crate::error::{Error, Result};

/// `Σ p ln(p/q)` with `0 ln 0 = 0`.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn jsd(p: &ChoiceDistribution, q: &ChoiceDistribution) -> Result<f64> {
    if p.arity() != q.arity() {
        return Err(Error::InvalidArgument(format!(
            "jsd of distributions with arity {} and {}",
            p.arity(),
            q.arity()
        )));
    }
    Ok(jsd_raw(p.probs(), q.probs()))
}

pub(crate) fn jsd_raw(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    // Summing the two halves in a fixed order keeps jsd(p, q) == jsd(q, p)
    // up to rounding of one addition.
    let (a, b) = (kl(p, &m), kl(q, &m));
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (0.5 * lo + 0.5 * hi).clamp(0.0, LN_2)
}
