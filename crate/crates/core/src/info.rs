//! Held-out loss accounting and usable-information estimates.
//!
//! Every quantity is in nats. Usable information of a representation is the
//! drop in mean held-out cross-entropy relative to the no-information
//! setting, computed over the identical set of (rater, instance) pairs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Instance, RaterPartition};
use crate::decoder::{ChoiceDistribution, Decoder, Query};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::par::Execution;
use crate::representations::{Renderer, RepresentationKind};
use crate::rng;
use crate::stats::percentile_sorted;

/// `-ln p(observed)`.
pub fn cross_entropy(dist: &ChoiceDistribution, observed: usize) -> Result<f64> {
    dist.nll(observed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub rater_id: String,
    pub instance_id: String,
    pub representation_tag: String,
    pub nll: f64,
}

type PairKey = (String, String);

/// Append-only collection of per-rating losses.
#[derive(Debug, Clone, Default)]
pub struct LossLedger {
    records: Vec<LossRecord>,
    seen: HashSet<(String, String, String)>,
}

impl LossLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: LossRecord) -> Result<()> {
        if !(record.nll.is_finite() && record.nll >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "nll must be finite and non-negative, got {}",
                record.nll
            )));
        }
        let key = (
            record.rater_id.clone(),
            record.instance_id.clone(),
            record.representation_tag.clone(),
        );
        if !self.seen.insert(key) {
            return Err(Error::Integrity(format!(
                "duplicate loss for rater `{}`, instance `{}`, tag `{}`",
                record.rater_id, record.instance_id, record.representation_tag
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn record(&mut self, rater_id: &str, instance_id: &str, tag: &str, nll: f64) -> Result<()> {
        self.push(LossRecord {
            rater_id: rater_id.into(),
            instance_id: instance_id.into(),
            representation_tag: tag.into(),
            nll,
        })
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.representation_tag.as_str()).collect()
    }

    pub fn slice(&self, tag: &str) -> Vec<&LossRecord> {
        self.records.iter().filter(|r| r.representation_tag == tag).collect()
    }

    fn by_pair(&self, tag: &str, scope: &Scope) -> BTreeMap<PairKey, f64> {
        self.records
            .iter()
            .filter(|r| r.representation_tag == tag && scope.contains(&r.instance_id))
            .map(|r| ((r.rater_id.clone(), r.instance_id.clone()), r.nll))
            .collect()
    }

    /// Per-pair losses of two tags, refusing sets that differ.
    fn paired(&self, left: &str, right: &str, scope: &Scope) -> Result<Vec<(PairKey, f64, f64)>> {
        let a = self.by_pair(left, scope);
        let b = self.by_pair(right, scope);
        if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
            return Err(Error::UnmatchedEvaluationSets {
                left: left.into(),
                right: right.into(),
            });
        }
        if a.is_empty() {
            return Err(Error::Empty("no loss records for the requested tags"));
        }
        Ok(a.into_iter()
            .zip(b.into_values())
            .map(|((k, x), y)| (k, x, y))
            .collect())
    }
}

/// One held-out decoder prediction and the label the rater actually gave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub rater_id: String,
    pub instance_id: String,
    pub representation_tag: String,
    pub observed: usize,
    pub probs: ChoiceDistribution,
}

/// Decoder predictions on every eval rating of every partitioned rater, for
/// each representation kind. Conditioning is rendered from fit data only.
///
/// Output order is (kind, rater, eval rating), independent of concurrency.
pub fn held_out_predictions(
    dataset: &Dataset,
    partitions: &BTreeMap<String, RaterPartition>,
    kinds: &[RepresentationKind],
    profiles: &BTreeMap<String, String>,
    renderer: &Renderer,
    decoder: &Decoder,
) -> Result<Vec<Prediction>> {
    let mut jobs = Vec::new();
    for kind in kinds {
        let tag = kind.to_string();
        for (rater_id, partition) in partitions {
            let rater = dataset
                .rater(rater_id)
                .ok_or_else(|| Error::Integrity(format!("partition for unknown rater `{rater_id}`")))?;
            let profile = if kind.needs_profile() {
                Some(
                    profiles
                        .get(rater_id)
                        .ok_or_else(|| Error::InvalidArgument(format!("no value profile for rater `{rater_id}`")))?
                        .as_str(),
                )
            } else {
                None
            };
            let rep = kind.instantiate(profile)?;
            let text = renderer.render(&rep, rater, partition, dataset.instances())?.text;
            for rating in &partition.eval {
                let instance = dataset
                    .instance(&rating.instance_id)
                    .ok_or_else(|| Error::Integrity(format!("unknown instance `{}`", rating.instance_id)))?;
                jobs.push((tag.clone(), rating, instance, text.clone()));
            }
        }
    }
    let queries: Vec<Query> = jobs.iter().map(|(_, _, inst, text)| Query::new(inst, text)).collect();
    decoder
        .predict_batch(&queries)
        .into_iter()
        .zip(&jobs)
        .map(|(dist, (tag, rating, _, _))| {
            Ok(Prediction {
                rater_id: rating.rater_id.clone(),
                instance_id: rating.instance_id.clone(),
                representation_tag: tag.clone(),
                observed: rating.choice_index,
                probs: dist?,
            })
        })
        .collect()
}

pub fn ledger_from_predictions(predictions: &[Prediction]) -> Result<LossLedger> {
    let mut ledger = LossLedger::new();
    for p in predictions {
        ledger.record(
            &p.rater_id,
            &p.instance_id,
            &p.representation_tag,
            cross_entropy(&p.probs, p.observed)?,
        )?;
    }
    Ok(ledger)
}

/// Mean loss of records sharing one tag: the plug-in estimate of the
/// conditional entropy under that representation.
pub fn estimate_conditional_entropy(records: &[&LossRecord]) -> Result<f64> {
    let first = records.first().ok_or(Error::Empty("loss slice"))?;
    if records.iter().any(|r| r.representation_tag != first.representation_tag) {
        return Err(Error::InvalidArgument("loss slice mixes representation tags".into()));
    }
    Ok(records.iter().map(|r| r.nll).sum::<f64>() / records.len() as f64)
}

/// Drop in loss from adding rater information. Negative values are kept.
pub fn usable_info(h_noinfo: f64, h_rep: f64) -> f64 {
    h_noinfo - h_rep
}

/// Share of the reference (maximal-examples) information retained.
pub fn info_preserved(i_profile: f64, i_max_examples: f64) -> Result<f64> {
    if i_max_examples == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(i_profile / i_max_examples)
}

/// Rater-clustered standard error of the mean paired difference
/// `nll(left) - nll(right)`. Ratings of one rater are treated as dependent.
pub fn clustered_standard_error(ledger: &LossLedger, left: &str, right: &str) -> Result<f64> {
    let pairs = ledger.paired(left, right, &Scope::Dataset)?;
    let clusters = rater_sums(&pairs);
    let n: f64 = clusters.iter().map(|c| c.1).sum();
    let mean = clusters.iter().map(|c| c.0).sum::<f64>() / n;
    let g = clusters.len() as f64;
    if g < 2.0 {
        return Ok(f64::NAN);
    }
    let ss: f64 = clusters.iter().map(|(s, c)| (s - mean * c).powi(2)).sum();
    Ok((ss * g / (g - 1.0)).sqrt() / n)
}

/// (Σ difference, count) per rater, in rater order.
fn rater_sums(pairs: &[(PairKey, f64, f64)]) -> Vec<(f64, f64)> {
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for ((rater, _), a, b) in pairs {
        let e = sums.entry(rater.as_str()).or_default();
        e.0 += a - b;
        e.1 += 1.0;
    }
    sums.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            confidence: 0.95,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Percentile bootstrap over raters of the rating-weighted mean difference.
pub fn bootstrap_ci(clusters: &[(f64, f64)], config: &BootstrapConfig, label: &str) -> (f64, f64) {
    if clusters.is_empty() || config.resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let g = clusters.len();
    let mut stats = config.execution.map_range(config.resamples, |b| {
        let mut rng = rng::stream(config.seed, &["bootstrap", label, &b.to_string()]);
        let (mut s, mut n) = (0.0, 0.0);
        for _ in 0..g {
            let (cs, cn) = clusters[rng.random_range(0..g)];
            s += cs;
            n += cn;
        }
        s / n
    });
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - config.confidence) / 2.0;
    (percentile_sorted(&stats, alpha), percentile_sorted(&stats, 1.0 - alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoRow {
    pub tag: String,
    pub mean_nll: f64,
    pub usable_info: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub info_preserved: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub noinfo_tag: String,
    pub max_examples_tag: Option<String>,
    pub rows: Vec<InfoRow>,
}

#[derive(Serialize)]
struct InfoCsvRow<'a> {
    tag: &'a str,
    mean_nll: f64,
    usable_info: f64,
    ci_low: f64,
    ci_high: f64,
    n: usize,
}

impl InfoReport {
    pub fn row(&self, tag: &str) -> Option<&InfoRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<InfoCsvRow> = self
            .rows
            .iter()
            .map(|r| InfoCsvRow {
                tag: &r.tag,
                mean_nll: r.mean_nll,
                usable_info: r.usable_info,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                n: r.n,
            })
            .collect();
        write_csv(path, &rows)
    }
}

/// Usable information for every tag in the ledger relative to `noinfo_tag`.
///
/// When `max_examples_tag` is given, each row also carries the share of that
/// reference's information it preserves.
pub fn info_report(
    ledger: &LossLedger,
    noinfo_tag: &str,
    max_examples_tag: Option<&str>,
    config: &BootstrapConfig,
) -> Result<InfoReport> {
    let mut rows = Vec::new();
    for tag in ledger.tags() {
        let pairs = ledger.paired(noinfo_tag, tag, &Scope::Dataset)?;
        let n = pairs.len();
        let h_noinfo = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let h_rep = pairs.iter().map(|p| p.2).sum::<f64>() / n as f64;
        let (ci_low, ci_high) = if tag == noinfo_tag {
            (0.0, 0.0)
        } else {
            bootstrap_ci(&rater_sums(&pairs), config, tag)
        };
        rows.push(InfoRow {
            tag: tag.to_string(),
            mean_nll: h_rep,
            usable_info: usable_info(h_noinfo, h_rep),
            ci_low,
            ci_high,
            n,
            info_preserved: None,
        });
    }
    if rows.iter().all(|r| r.tag != noinfo_tag) {
        return Err(Error::InvalidArgument(format!("ledger has no `{noinfo_tag}` records")));
    }
    if let Some(reference) = max_examples_tag {
        let i_max = rows
            .iter()
            .find(|r| r.tag == reference)
            .map(|r| r.usable_info)
            .ok_or_else(|| Error::InvalidArgument(format!("ledger has no `{reference}` records")))?;
        for row in &mut rows {
            row.info_preserved = info_preserved(row.usable_info, i_max).ok();
        }
    }
    Ok(InfoReport {
        noinfo_tag: noinfo_tag.into(),
        max_examples_tag: max_examples_tag.map(str::to_string),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scope {
    Dataset,
    Instance(String),
}

impl Scope {
    fn contains(&self, instance_id: &str) -> bool {
        match self {
            Scope::Dataset => true,
            Scope::Instance(id) => id == instance_id,
        }
    }

    pub fn key(&self) -> String {
        match self {
            Scope::Dataset => "dataset".into(),
            Scope::Instance(id) => format!("instance:{id}"),
        }
    }
}

/// Total = value-epistemic + aleatoric uncertainty, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub scope: Scope,
    pub total: f64,
    pub value_epistemic: f64,
    pub aleatoric: f64,
    pub n: usize,
}

impl UncertaintyReport {
    pub fn epistemic_fraction(&self) -> f64 {
        self.value_epistemic / self.total
    }
}

pub fn uncertainty_decomposition(
    ledger: &LossLedger,
    noinfo_tag: &str,
    profile_tag: &str,
    scope: Scope,
) -> Result<UncertaintyReport> {
    let pairs = ledger.paired(noinfo_tag, profile_tag, &scope)?;
    let n = pairs.len();
    let total = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let aleatoric = pairs.iter().map(|p| p.2).sum::<f64>() / n as f64;
    Ok(UncertaintyReport {
        scope,
        total,
        value_epistemic: total - aleatoric,
        aleatoric,
        n,
    })
}

/// Decomposition for every instance that has records, in instance order.
pub fn instance_uncertainties(
    ledger: &LossLedger,
    noinfo_tag: &str,
    profile_tag: &str,
) -> Result<Vec<UncertaintyReport>> {
    let instances: BTreeSet<&str> = ledger
        .slice(noinfo_tag)
        .into_iter()
        .map(|r| r.instance_id.as_str())
        .collect();
    instances
        .into_iter()
        .map(|id| uncertainty_decomposition(ledger, noinfo_tag, profile_tag, Scope::Instance(id.into())))
        .collect()
}

/// How much a profile reduces loss on one instance's observed ratings.
/// Positive when the profile moves mass towards what raters chose.
pub fn value_relevance(
    decoder: &Decoder,
    instance: &Instance,
    profile_conditioning: &str,
    observed: &[usize],
) -> Result<f64> {
    if observed.is_empty() {
        return Err(Error::Empty("instance has no observed ratings"));
    }
    let base = decoder.predict(instance, "")?;
    let cond = decoder.predict(instance, profile_conditioning)?;
    let mut diff = 0.0;
    for &y in observed {
        diff += base.nll(y)? - cond.nll(y)?;
    }
    Ok(diff / observed.len() as f64)
}
