use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::ChoiceDistribution;
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::stats::argmax;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub confidence_low: f64,
    pub confidence_high: f64,
    pub mean_confidence: Option<f64>,
    pub empirical_accuracy: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub n: usize,
}

impl CalibrationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.bins)
    }
}

/// Reliability bins over max-probability confidence and the count-weighted
/// expected calibration error.
///
/// Bins are equal-width over `[0, 1]`; the last one is closed. A prediction
/// is correct when its argmax (lowest index on ties) equals the observed
/// label.
pub fn calibration_report(predictions: &[(ChoiceDistribution, usize)], n_bins: usize) -> Result<CalibrationReport> {
    if predictions.is_empty() {
        return Err(Error::Empty("calibration predictions"));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be positive".into()));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (dist, observed) in predictions {
        if *observed >= dist.arity() {
            return Err(Error::InvalidArgument(format!(
                "observed index {observed} out of range for arity {}",
                dist.arity()
            )));
        }
        let top = argmax(dist.probs()).expect("arity >= 2");
        let conf = dist.probs()[top];
        let b = ((conf * n_bins as f64) as usize).min(n_bins - 1);
        conf_sum[b] += conf;
        count[b] += 1;
        correct[b] += usize::from(top == *observed);
    }
    let n = predictions.len();
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_confidence, empirical_accuracy) = if count[b] == 0 {
                (None, None)
            } else {
                let c = count[b] as f64;
                let (mc, acc) = (conf_sum[b] / c, correct[b] as f64 / c);
                ece += c / n as f64 * (mc - acc).abs();
                (Some(mc), Some(acc))
            };
            CalibrationBin {
                confidence_low: b as f64 / n_bins as f64,
                confidence_high: (b + 1) as f64 / n_bins as f64,
                mean_confidence,
                empirical_accuracy,
                count: count[b],
            }
        })
        .collect();
    Ok(CalibrationReport { bins, ece, n })
}
