use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::divergence::jsd_raw;
use crate::clustering::CandidateProfile;
use crate::dataset::Instance;
use crate::decoder::{Decoder, Query};
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::rng;

/// Pairs at or below this divergence are flagged as low-contrast.
pub const LOW_CONTRAST_JSD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

/// One "which profile produced distribution x?" question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilityItem {
    pub item_id: String,
    pub instance_id: String,
    pub prompt: String,
    pub choices: Vec<String>,
    pub profile_a: CandidateProfile,
    pub profile_b: CandidateProfile,
    pub distribution_x: Vec<f64>,
    pub distribution_y: Vec<f64>,
    pub jsd: f64,
    pub low_contrast: bool,
    pub order_seed: u64,
    /// Withheld from the task file.
    #[serde(skip)]
    pub answer_key: Option<Side>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub item_id: String,
    pub answer: Side,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub item_id: String,
    pub choice: Side,
}

/// Top-`k` most divergent candidate pairs for one instance.
///
/// Pairs are ranked by JSD, descending, then by (first, second) candidate
/// index. Whether `x` shows profile a or b is a seeded coin flip per item.
pub fn build_interpretability_task(
    instance: &Instance,
    candidates: &[CandidateProfile],
    decoder: &Decoder,
    top_k: usize,
    seed: u64,
) -> Result<Vec<InterpretabilityItem>> {
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument(
            "interpretability needs at least 2 candidate profiles".into(),
        ));
    }
    let queries: Vec<Query> = candidates.iter().map(|c| Query::new(instance, &c.text)).collect();
    let dists = decoder
        .predict_batch(&queries)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for a in 0..candidates.len() {
        for b in a + 1..candidates.len() {
            pairs.push((jsd_raw(dists[a].probs(), dists[b].probs()), a, b));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    pairs
        .into_iter()
        .take(top_k.max(1))
        .enumerate()
        .map(|(rank, (divergence, a, b))| {
            let item_id = format!("{}#{rank}", instance.id);
            let order_seed = rng::derive_seed(seed, &["task-order", &item_id]);
            let x_is_a = rng::stream(order_seed, &[]).random_bool(0.5);
            let (x, y) = if x_is_a { (a, b) } else { (b, a) };
            Ok(InterpretabilityItem {
                item_id,
                instance_id: instance.id.clone(),
                prompt: instance.prompt.clone(),
                choices: instance.choices.clone(),
                profile_a: candidates[a].clone(),
                profile_b: candidates[b].clone(),
                distribution_x: dists[x].probs().to_vec(),
                distribution_y: dists[y].probs().to_vec(),
                jsd: divergence,
                low_contrast: divergence <= LOW_CONTRAST_JSD,
                order_seed,
                answer_key: Some(if x_is_a { Side::A } else { Side::B }),
            })
        })
        .collect()
}

fn key_of(item: &InterpretabilityItem) -> Result<Side> {
    item.answer_key
        .ok_or_else(|| Error::Integrity(format!("item `{}` has no answer key", item.item_id)))
}

/// Write the blind task file and the separate answer-key file.
pub fn write_interpretability_task(items: &[InterpretabilityItem], tasks: &Path, keys: &Path) -> Result<()> {
    let answer_keys = items
        .iter()
        .map(|i| {
            Ok(AnswerKey {
                item_id: i.item_id.clone(),
                answer: key_of(i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(tasks, items)?;
    write_jsonl(keys, &answer_keys)
}

/// Re-query the decoder and confirm the item's distributions and key.
pub fn replay_item(item: &InterpretabilityItem, instance: &Instance, decoder: &Decoder) -> Result<bool> {
    let (x_profile, y_profile) = match key_of(item)? {
        Side::A => (&item.profile_a, &item.profile_b),
        Side::B => (&item.profile_b, &item.profile_a),
    };
    let x = decoder.predict(instance, &x_profile.text)?;
    let y = decoder.predict(instance, &y_profile.text)?;
    Ok(x.probs() == item.distribution_x.as_slice() && y.probs() == item.distribution_y.as_slice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilityScore {
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub correct: usize,
    pub n: usize,
    pub chance: f64,
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Judge accuracy against the answer keys, with a Wilson 95% interval.
pub fn score_interpretability(keys: &[AnswerKey], responses: &[JudgeResponse]) -> Result<InterpretabilityScore> {
    if keys.is_empty() {
        return Err(Error::Empty("answer keys"));
    }
    let mut key_map = BTreeMap::new();
    for k in keys {
        if key_map.insert(k.item_id.as_str(), k.answer).is_some() {
            return Err(Error::Integrity(format!("duplicate answer key for `{}`", k.item_id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut correct = 0;
    for r in responses {
        let answer = key_map
            .get(r.item_id.as_str())
            .ok_or_else(|| Error::Integrity(format!("response for unknown item `{}`", r.item_id)))?;
        if !seen.insert(r.item_id.as_str()) {
            return Err(Error::Integrity(format!("duplicate response for `{}`", r.item_id)));
        }
        correct += usize::from(*answer == r.choice);
    }
    if let Some(missing) = key_map.keys().find(|id| !seen.contains(*id)) {
        return Err(Error::Integrity(format!("no response for item `{missing}`")));
    }
    let n = keys.len();
    let (ci_low, ci_high) = wilson_interval(correct, n, 0.95);
    Ok(InterpretabilityScore {
        accuracy: correct as f64 / n as f64,
        ci_low,
        ci_high,
        correct,
        n,
        chance: 0.5,
    })
}
