use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{Instance, RaterPartition};
use crate::decoder::{ChoiceDistribution, Decoder, Query};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::rng;

pub const DEFAULT_PROFILE_SAMPLE: usize = 100;

/// Probability that two distinct simulated raters agree, each drawing a
/// label from their own distribution. Self-pairs are excluded.
pub fn pairwise_agreement(dists: &[ChoiceDistribution]) -> Result<f64> {
    let n = dists.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "agreement needs at least 2 distributions".into(),
        ));
    }
    let arity = dists[0].arity();
    if dists.iter().any(|d| d.arity() != arity) {
        return Err(Error::InvalidArgument(
            "agreement over distributions of different arity".into(),
        ));
    }
    // Σ_{i<j} p_i·p_j = (|Σ p_i|² − Σ |p_i|²) / 2
    let mut sum = vec![0.0; arity];
    let mut self_dot = 0.0;
    for d in dists {
        for (s, p) in sum.iter_mut().zip(d.probs()) {
            *s += p;
            self_dot += p * p;
        }
    }
    let total: f64 = sum.iter().map(|s| s * s).sum();
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(((total - self_dot) / 2.0 / pairs).clamp(0.0, 1.0))
}

/// Decoder-simulated agreement on one instance from a sample of profiles.
pub fn estimated_agreement(instance: &Instance, profiles: &[&str], decoder: &Decoder) -> Result<f64> {
    let queries: Vec<Query> = profiles.iter().map(|p| Query::new(instance, p)).collect();
    let dists = decoder
        .predict_batch(&queries)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    pairwise_agreement(&dists)
}

/// Seeded sample (without replacement) of at most `n` profiles whose source
/// rater did not use `instance_id` as a fit demonstration.
pub fn sample_profiles_for_instance<'a>(
    profiles: &'a BTreeMap<String, String>,
    partitions: &BTreeMap<String, RaterPartition>,
    instance_id: &str,
    n: usize,
    seed: u64,
) -> Vec<&'a str> {
    let eligible: Vec<&str> = profiles
        .iter()
        .filter(|(rater, _)| {
            partitions
                .get(*rater)
                .is_none_or(|p| p.fit.iter().all(|r| r.instance_id != instance_id))
        })
        .map(|(_, text)| text.as_str())
        .collect();
    if eligible.len() <= n {
        return eligible;
    }
    let mut rng = rng::stream(seed, &["agreement-sample", instance_id]);
    let mut picked = index::sample(&mut rng, eligible.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| eligible[i]).collect()
}

/// Fraction of agreeing unordered rater pairs, or `None` below `min_raters`.
pub fn observed_agreement(labels: &[usize], min_raters: usize) -> Option<f64> {
    let n = labels.len();
    if n < min_raters.max(2) {
        return None;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    let agreeing: usize = counts.values().map(|c| c * (c - 1) / 2).sum();
    Some(agreeing as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub instance_id: String,
    pub estimated: f64,
    pub observed: f64,
    pub n_raters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub p_value: f64,
    pub slope_se: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub rows: Vec<AgreementRow>,
    /// Absent when the rows cannot support a fit.
    pub summary: Option<OlsFit>,
}

impl AgreementReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }
}

/// Least squares of `y` on `x`, with a two-sided t-test on the slope.
pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::InvalidArgument("ols inputs differ in length".into()));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!("ols needs at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= f64::EPSILON * nf * mx.abs().max(1.0) {
        return Err(Error::InvalidArgument("regressor has no variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    let df = nf - 2.0;
    let slope_se = (sse / df / sxx).sqrt();
    let p_value = if slope_se == 0.0 {
        if slope == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        2.0 * (1.0 - t.cdf((slope / slope_se).abs()))
    };
    Ok(OlsFit {
        slope,
        intercept,
        r_squared,
        p_value,
        slope_se,
        n,
    })
}

/// Observed agreement regressed on estimated agreement.
pub fn agreement_correlation(rows: &[AgreementRow]) -> Result<OlsFit> {
    let x: Vec<f64> = rows.iter().map(|r| r.estimated).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.observed).collect();
    ols(&x, &y)
}
