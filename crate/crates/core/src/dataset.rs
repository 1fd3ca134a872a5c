//! Instances, raters, ratings, and the splits built on top of them.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::rng;
use crate::stats::entropy_nats;

/// Smallest number of ratings a rater needs for a two-per-side fit/eval split.
pub const MIN_RATINGS_PER_RATER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub prompt: String,
    pub choices: Vec<String>,
}

impl Instance {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, choices: Vec<String>) -> Result<Self> {
        let instance = Instance {
            id: id.into(),
            prompt: prompt.into(),
            choices,
        };
        instance.validate()?;
        Ok(instance)
    }

    fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::Integrity(format!(
                "instance `{}` has {} choice(s); at least 2 required",
                self.id,
                self.choices.len()
            )));
        }
        let mut seen = HashSet::new();
        for choice in &self.choices {
            if !seen.insert(choice.as_str()) {
                return Err(Error::Integrity(format!(
                    "instance `{}` repeats choice label `{choice}`",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn arity(&self) -> usize {
        self.choices.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rating {
    pub rater_id: String,
    pub instance_id: String,
    pub choice_index: usize,
}

impl Rating {
    pub fn new(rater_id: impl Into<String>, instance_id: impl Into<String>, choice: usize) -> Self {
        Rating {
            rater_id: rater_id.into(),
            instance_id: instance_id.into(),
            choice_index: choice,
        }
    }

    /// Stable identifier of the (rater, instance) pair.
    pub fn id(&self) -> String {
        format!("{}\u{1f}{}", self.rater_id, self.instance_id)
    }
}

/// The on-disk rater record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterRecord {
    pub id: String,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rater {
    pub id: String,
    pub demographics: BTreeMap<String, String>,
    /// Sorted by instance id.
    pub ratings: Vec<Rating>,
}

/// Validated collection of instances and raters, iterated in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    instances: BTreeMap<String, Instance>,
    raters: BTreeMap<String, Rater>,
}

impl Dataset {
    /// Build a dataset, checking uniqueness and referential integrity.
    pub fn new(
        name: impl Into<String>,
        instances: Vec<Instance>,
        raters: Vec<RaterRecord>,
        ratings: Vec<Rating>,
    ) -> Result<Self> {
        let ratings = ratings
            .into_iter()
            .enumerate()
            .map(|(i, r)| (format!("rating #{}", i + 1), r))
            .collect();
        Self::build(name.into(), instances, raters, ratings)
    }

    fn build(
        name: String,
        instances: Vec<Instance>,
        raters: Vec<RaterRecord>,
        ratings: Vec<(String, Rating)>,
    ) -> Result<Self> {
        let mut instance_map = BTreeMap::new();
        for instance in instances {
            instance.validate()?;
            let id = instance.id.clone();
            if instance_map.insert(id.clone(), instance).is_some() {
                return Err(Error::Integrity(format!("duplicate instance id `{id}`")));
            }
        }
        let mut rater_map = BTreeMap::new();
        for record in raters {
            let id = record.id.clone();
            let rater = Rater {
                id: record.id,
                demographics: record.demographics,
                ratings: Vec::new(),
            };
            if rater_map.insert(id.clone(), rater).is_some() {
                return Err(Error::Integrity(format!("duplicate rater id `{id}`")));
            }
        }
        let mut seen = HashSet::new();
        for (origin, rating) in ratings {
            let instance = instance_map.get(&rating.instance_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "{origin}: unknown instance_id `{}` (rater `{}`)",
                    rating.instance_id, rating.rater_id
                ))
            })?;
            if rating.choice_index >= instance.arity() {
                return Err(Error::Integrity(format!(
                    "{origin}: choice_index {} out of range for instance `{}` with {} choices",
                    rating.choice_index,
                    instance.id,
                    instance.arity()
                )));
            }
            let rater = rater_map.get_mut(&rating.rater_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "{origin}: unknown rater_id `{}` (instance `{}`)",
                    rating.rater_id, rating.instance_id
                ))
            })?;
            if !seen.insert((rating.rater_id.clone(), rating.instance_id.clone())) {
                return Err(Error::Integrity(format!(
                    "{origin}: duplicate rating for rater `{}` on instance `{}`",
                    rating.rater_id, rating.instance_id
                )));
            }
            rater.ratings.push(rating);
        }
        for rater in rater_map.values_mut() {
            rater.ratings.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        }
        Ok(Dataset {
            name,
            instances: instance_map,
            raters: rater_map,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn instances(&self) -> &BTreeMap<String, Instance> {
        &self.instances
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.instances.get(id)
    }

    pub fn raters(&self) -> &BTreeMap<String, Rater> {
        &self.raters
    }

    pub fn rater(&self, id: &str) -> Option<&Rater> {
        self.raters.get(id)
    }

    pub fn ratings(&self) -> impl Iterator<Item = &Rating> {
        self.raters.values().flat_map(|r| r.ratings.iter())
    }

    pub fn n_ratings(&self) -> usize {
        self.raters.values().map(|r| r.ratings.len()).sum()
    }

    /// All ratings on one instance, in rater-id order.
    pub fn ratings_for_instance(&self, instance_id: &str) -> Vec<&Rating> {
        self.ratings().filter(|r| r.instance_id == instance_id).collect()
    }

    /// Same instances, only the named raters.
    fn with_raters<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> Dataset {
        let raters = keep
            .into_iter()
            .filter_map(|id| self.raters.get(id))
            .map(|r| (r.id.clone(), r.clone()))
            .collect();
        Dataset {
            name: self.name.clone(),
            instances: self.instances.clone(),
            raters,
        }
    }

    /// Write the instances/raters/ratings JSONL triplet into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<DatasetPaths> {
        let paths = DatasetPaths::in_dir(dir);
        write_jsonl(&paths.instances, self.instances.values())?;
        let records: Vec<RaterRecord> = self
            .raters
            .values()
            .map(|r| RaterRecord {
                id: r.id.clone(),
                demographics: r.demographics.clone(),
            })
            .collect();
        write_jsonl(&paths.raters, &records)?;
        write_jsonl(&paths.ratings, self.ratings())?;
        Ok(paths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub instances: PathBuf,
    pub raters: PathBuf,
    pub ratings: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            instances: dir.join("instances.jsonl"),
            raters: dir.join("raters.jsonl"),
            ratings: dir.join("ratings.jsonl"),
        }
    }
}

/// Load and validate the JSONL triplet.
pub fn load_dataset(name: &str, paths: &DatasetPaths, strict: bool) -> Result<Dataset> {
    let instances = read_jsonl::<Instance>(&paths.instances, &["id", "prompt", "choices"], strict)?;
    let mut checked = Vec::with_capacity(instances.len());
    for located in instances {
        located.value.validate().map_err(|e| Error::Parse {
            path: paths.instances.clone(),
            line: located.line,
            message: e.to_string(),
        })?;
        checked.push(located.value);
    }
    let raters = read_jsonl::<RaterRecord>(&paths.raters, &["id", "demographics"], strict)?
        .into_iter()
        .map(|l| l.value)
        .collect();
    let ratings = read_jsonl::<Rating>(&paths.ratings, &["rater_id", "instance_id", "choice_index"], strict)?
        .into_iter()
        .map(|l| (format!("{}:{}", paths.ratings.display(), l.line), l.value))
        .collect();
    Dataset::build(name.to_string(), checked, raters, ratings)
}

/// Drop raters with fewer than `min_count` ratings. Instances are kept.
pub fn filter_min_ratings(dataset: &Dataset, min_count: usize) -> Result<Dataset> {
    if min_count < MIN_RATINGS_PER_RATER {
        return Err(Error::InvalidArgument(format!(
            "min_count must be at least {MIN_RATINGS_PER_RATER}, got {min_count}"
        )));
    }
    let keep: Vec<&str> = dataset
        .raters
        .values()
        .filter(|r| r.ratings.len() >= min_count)
        .map(|r| r.id.as_str())
        .collect();
    Ok(dataset.with_raters(keep))
}

/// Split raters into disjoint (train, test) datasets; the test side receives
/// `round_half_even(test_fraction * n_raters)` raters.
pub fn split_raters(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.raters.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 raters to split, got {n}"
        )));
    }
    let mut ids: Vec<&str> = dataset.raters.keys().map(String::as_str).collect();
    ids.shuffle(&mut rng::stream(seed, &["split-raters"]));
    let n_test = (test_fraction * n as f64).round_ties_even() as usize;
    let (test, train) = ids.split_at(n_test.min(n));
    Ok((
        dataset.with_raters(train.iter().copied()),
        dataset.with_raters(test.iter().copied()),
    ))
}

/// Per-rater split of ratings into profile-fitting and held-out evaluation sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterPartition {
    pub rater_id: String,
    /// In draw order; "the first n demonstrations" means a prefix of this list.
    pub fit: Vec<Rating>,
    pub eval: Vec<Rating>,
}

impl RaterPartition {
    /// Hex digest of the sorted fit rating ids.
    pub fn fingerprint(&self) -> String {
        let mut ids: Vec<String> = self.fit.iter().map(Rating::id).collect();
        ids.sort();
        let mut hasher = Sha256::new();
        for id in &ids {
            hasher.update((id.len() as u64).to_le_bytes());
            hasher.update(id.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Draw `|fit| ~ U{2, ..., n-2}` and a uniform subset of that size.
///
/// The stream is keyed by `(seed, rater id)`, so the result does not depend on
/// the order raters are visited.
pub fn partition_ratings(rater: &Rater, seed: u64) -> Result<RaterPartition> {
    let n = rater.ratings.len();
    if n < MIN_RATINGS_PER_RATER {
        return Err(Error::InvalidArgument(format!(
            "rater `{}` has {n} ratings; at least {MIN_RATINGS_PER_RATER} needed to partition",
            rater.id
        )));
    }
    let mut rng = rng::stream(seed, &["partition", &rater.id]);
    let fit_size = rng.random_range(2..=n - 2);
    let mut shuffled = rater.ratings.clone();
    shuffled.shuffle(&mut rng);
    let eval = shuffled.split_off(fit_size);
    Ok(RaterPartition {
        rater_id: rater.id.clone(),
        fit: shuffled,
        eval,
    })
}

/// Partition every rater of the dataset.
pub fn partition_all(dataset: &Dataset, seed: u64) -> Result<BTreeMap<String, RaterPartition>> {
    dataset
        .raters
        .values()
        .map(|r| Ok((r.id.clone(), partition_ratings(r, seed)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub label_entropy_nats: f64,
    pub majority_class_accuracy: f64,
}

/// Empirical label entropy and majority-class accuracy.
///
/// Instances with different arities are grouped by arity; each group's values
/// are combined with weights proportional to its number of ratings.
pub fn dataset_baselines(dataset: &Dataset) -> Result<Baselines> {
    let mut counts: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for rating in dataset.ratings() {
        let arity = dataset.instances[&rating.instance_id].arity();
        counts.entry(arity).or_insert_with(|| vec![0; arity])[rating.choice_index] += 1;
    }
    let total: u64 = counts.values().flatten().sum();
    if total == 0 {
        return Err(Error::Empty("dataset has no ratings"));
    }
    let mut entropy = 0.0;
    let mut majority = 0.0;
    for group in counts.values() {
        let n: u64 = group.iter().sum();
        let probs: Vec<f64> = group.iter().map(|&c| c as f64 / n as f64).collect();
        let weight = n as f64 / total as f64;
        entropy += weight * entropy_nats(&probs);
        majority += weight * probs.iter().cloned().fold(0.0, f64::max);
    }
    Ok(Baselines {
        label_entropy_nats: entropy,
        majority_class_accuracy: majority,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn binary(id: &str) -> Instance {
        Instance::new(id, format!("prompt {id}"), vec!["yes".into(), "no".into()]).unwrap()
    }

    /// Raters `r0..` with the given rating counts over instances `i00..`.
    pub fn with_counts(counts: &[usize]) -> Dataset {
        let n_inst = counts.iter().copied().max().unwrap_or(0).max(1);
        let instances = (0..n_inst).map(|j| binary(&format!("i{j:02}"))).collect();
        let raters = (0..counts.len())
            .map(|i| RaterRecord {
                id: format!("r{i}"),
                demographics: BTreeMap::new(),
            })
            .collect();
        let ratings = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| (0..c).map(move |j| Rating::new(format!("r{i}"), format!("i{j:02}"), (i + j) % 2)))
            .collect();
        Dataset::new("fixture", instances, raters, ratings).unwrap()
    }
}
