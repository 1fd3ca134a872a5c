//! Extrinsic evaluations of a decoder and its value profiles.

mod agreement;
mod calibration;
mod divergence;
mod interpret;

pub use agreement::{
    agreement_correlation, estimated_agreement, observed_agreement, ols, pairwise_agreement,
    sample_profiles_for_instance, AgreementReport, AgreementRow, OlsFit, DEFAULT_PROFILE_SAMPLE,
};
pub use calibration::{calibration_report, CalibrationBin, CalibrationReport, DEFAULT_BINS};
pub use divergence::jsd;
pub use interpret::{
    build_interpretability_task, replay_item, score_interpretability, wilson_interval, write_interpretability_task,
    AnswerKey, InterpretabilityItem, InterpretabilityScore, JudgeResponse, Side, LOW_CONTRAST_JSD,
};

use serde::{Deserialize, Serialize};

use crate::clustering::LossMatrix;
use crate::error::{Error, Result};

/// Loss of a rater under their best cluster.
pub fn rater_difficulty(cluster_losses: &[f64]) -> Result<f64> {
    cluster_losses
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or(Error::Empty("clusters"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterDifficulty {
    pub rater_id: String,
    pub difficulty: f64,
    pub n_ratings: usize,
}

/// Difficulty of every rater in `losses` against the chosen `clusters`.
///
/// `n_ratings[i]` is the number of ratings summed into row `i`.
pub fn difficulty_table(losses: &LossMatrix, clusters: &[usize], n_ratings: &[usize]) -> Result<Vec<RaterDifficulty>> {
    if n_ratings.len() != losses.n_raters() {
        return Err(Error::InvalidArgument(
            "rating counts do not match the loss matrix".into(),
        ));
    }
    (0..losses.n_raters())
        .map(|i| {
            let row: Vec<f64> = clusters.iter().map(|&v| losses.get(i, v)).collect();
            Ok(RaterDifficulty {
                rater_id: losses.rater_ids()[i].clone(),
                difficulty: rater_difficulty(&row)?,
                n_ratings: n_ratings[i],
            })
        })
        .collect()
}
