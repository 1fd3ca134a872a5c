//! Seeded ground-truth populations with closed-form information quantities.
//!
//! Raters belong to latent groups; each group has its own label distribution
//! per instance. The generated oracle answers no-information queries with the
//! weight-mixed marginal and a group's profile text with that group's
//! conditional, which makes it Bayes-optimal for the population.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetPaths, Instance, RaterRecord, Rating};
use crate::decoder::{ChoiceDistribution, TableOracleBackend};
use crate::error::{BackendError, Error, Result};
use crate::io::{read_json, write_json, write_jsonl};
use crate::representations::{ConditioningTemplate, EncoderClient, ProfileRecord};
use crate::rng;
use crate::stats::entropy_nats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub id: String,
    pub weight: f64,
    /// Ground-truth profile text; defaults to a name derived from the id.
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub id: String,
    pub prompt: String,
    pub choices: Vec<String>,
    /// One distribution per group, in group order.
    pub group_probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub name: String,
    pub seed: u64,
    pub n_raters: usize,
    pub ratings_per_rater: usize,
    pub groups: Vec<GroupSpec>,
    pub instances: Vec<InstanceSpec>,
}

impl GeneratorSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("generator spec `{}`: {m}", self.name)));
        if self.groups.is_empty() {
            return bad("no groups".into());
        }
        if self.groups.iter().any(|g| !(g.weight.is_finite() && g.weight >= 0.0)) {
            return bad("group weights must be finite and non-negative".into());
        }
        let total: f64 = self.groups.iter().map(|g| g.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("group weights sum to {total}, not 1"));
        }
        let mut texts: Vec<String> = self.groups.iter().map(|g| self.profile_text_of(g)).collect();
        texts.sort();
        texts.dedup();
        if texts.len() != self.groups.len() || texts.iter().any(|t| t.trim().is_empty()) {
            return bad("group profile texts must be distinct and non-empty".into());
        }
        if self.instances.is_empty() {
            return bad("no instances".into());
        }
        if self.ratings_per_rater == 0 || self.ratings_per_rater > self.instances.len() {
            return bad(format!(
                "ratings_per_rater must be in 1..={}, got {}",
                self.instances.len(),
                self.ratings_per_rater
            ));
        }
        if self.n_raters == 0 {
            return bad("n_raters must be positive".into());
        }
        for inst in &self.instances {
            if inst.group_probs.len() != self.groups.len() {
                return bad(format!(
                    "instance `{}` has {} group rows",
                    inst.id,
                    inst.group_probs.len()
                ));
            }
            for row in &inst.group_probs {
                if row.len() != inst.choices.len() {
                    return bad(format!("instance `{}` has a row of the wrong arity", inst.id));
                }
                ChoiceDistribution::from_probs(row.clone())?;
            }
        }
        Ok(())
    }

    fn profile_text_of(&self, group: &GroupSpec) -> String {
        group
            .profile
            .clone()
            .unwrap_or_else(|| format!("Shares the values of group {}.", group.id))
    }

    pub fn profile_texts(&self) -> Vec<String> {
        self.groups.iter().map(|g| self.profile_text_of(g)).collect()
    }

    /// Floored group-conditional distributions, `[instance][group]`.
    fn conditionals(&self) -> Result<Vec<Vec<ChoiceDistribution>>> {
        self.instances
            .iter()
            .map(|inst| {
                inst.group_probs
                    .iter()
                    .map(|p| ChoiceDistribution::from_probs(p.clone()))
                    .collect()
            })
            .collect()
    }

    fn mixture(&self, conditionals: &[ChoiceDistribution]) -> Result<ChoiceDistribution> {
        let arity = conditionals[0].arity();
        let mut mix = vec![0.0; arity];
        for (g, d) in self.groups.iter().zip(conditionals) {
            for (m, p) in mix.iter_mut().zip(d.probs()) {
                *m += g.weight * p;
            }
        }
        ChoiceDistribution::from_probs(mix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticQuantities {
    pub h_y_given_x: f64,
    pub h_y_given_xg: f64,
    pub i: f64,
}

/// Exact entropies and group information for uniformly drawn instances.
pub fn analytic_quantities(spec: &GeneratorSpec) -> Result<AnalyticQuantities> {
    spec.validate()?;
    let conditionals = spec.conditionals()?;
    let n = spec.instances.len() as f64;
    let mut h_x = 0.0;
    let mut h_xg = 0.0;
    for conds in &conditionals {
        h_x += entropy_nats(spec.mixture(conds)?.probs());
        h_xg += spec
            .groups
            .iter()
            .zip(conds)
            .map(|(g, d)| g.weight * entropy_nats(d.probs()))
            .sum::<f64>();
    }
    let (h_y_given_x, h_y_given_xg) = (h_x / n, h_xg / n);
    Ok(AnalyticQuantities {
        h_y_given_x,
        h_y_given_xg,
        i: h_y_given_x - h_y_given_xg,
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticPopulation {
    pub dataset: Dataset,
    /// Group index per rater.
    pub groups: BTreeMap<String, usize>,
    /// Ground-truth profile text per rater.
    pub profiles: BTreeMap<String, String>,
    pub oracle: TableOracleBackend,
}

pub struct PopulationPaths {
    pub dataset: DatasetPaths,
    pub oracle: PathBuf,
    pub groups: PathBuf,
    pub profiles: PathBuf,
}

impl SyntheticPopulation {
    /// Dataset triplet, oracle table, group map, and ground-truth profiles.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PopulationPaths> {
        let dataset = self.dataset.write_to_dir(dir)?;
        let paths = PopulationPaths {
            dataset,
            oracle: dir.join("oracle.jsonl"),
            groups: dir.join("groups.json"),
            profiles: dir.join("profiles.jsonl"),
        };
        self.oracle.save(&paths.oracle)?;
        write_json(&paths.groups, &self.groups)?;
        let records: Vec<ProfileRecord> = self
            .profiles
            .iter()
            .map(|(rater, text)| ProfileRecord {
                rater_id: rater.clone(),
                profile_text: text.clone(),
                encoder_id: "ground-truth".into(),
                fit_fingerprint: String::new(),
            })
            .collect();
        write_jsonl(&paths.profiles, &records)?;
        Ok(paths)
    }
}

pub fn oracle_id(spec: &GeneratorSpec) -> String {
    format!("synthetic-oracle:{}", spec.name)
}

pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticPopulation> {
    spec.validate()?;
    let conditionals = spec.conditionals()?;
    let texts = spec.profile_texts();

    let instances: Vec<Instance> = spec
        .instances
        .iter()
        .map(|i| Instance::new(&i.id, &i.prompt, i.choices.clone()))
        .collect::<Result<_>>()?;

    let mut oracle = TableOracleBackend::new(oracle_id(spec));
    for (inst, conds) in instances.iter().zip(&conditionals) {
        oracle.insert_default(&inst.id, spec.mixture(conds)?);
        for (text, d) in texts.iter().zip(conds) {
            oracle.insert(&inst.id, text, d.clone());
        }
    }

    let width = (spec.n_raters - 1).to_string().len();
    let weights = WeightedIndex::new(spec.groups.iter().map(|g| g.weight))
        .map_err(|e| Error::InvalidArgument(format!("group weights: {e}")))?;
    let mut group_rng = rng::stream(spec.seed, &["synthetic", "groups"]);
    let mut raters = Vec::with_capacity(spec.n_raters);
    let mut ratings = Vec::with_capacity(spec.n_raters * spec.ratings_per_rater);
    let mut groups = BTreeMap::new();
    let mut profiles = BTreeMap::new();
    for r in 0..spec.n_raters {
        let id = format!("r{r:0width$}");
        let g = weights.sample(&mut group_rng);
        let mut rng = rng::stream(spec.seed, &["synthetic", "ratings", &id]);
        let mut chosen = index::sample(&mut rng, instances.len(), spec.ratings_per_rater).into_vec();
        chosen.sort_unstable();
        for j in chosen {
            let label = WeightedIndex::new(conditionals[j][g].probs())
                .expect("validated distribution")
                .sample(&mut rng);
            ratings.push(Rating::new(&id, &instances[j].id, label));
        }
        raters.push(RaterRecord {
            id: id.clone(),
            demographics: spec.groups[g].demographics.clone(),
        });
        groups.insert(id.clone(), g);
        profiles.insert(id, texts[g].clone());
    }
    let dataset = Dataset::new(&spec.name, instances, raters, ratings)?;
    Ok(SyntheticPopulation {
        dataset,
        groups,
        profiles,
        oracle,
    })
}

/// Maximum a-posteriori group encoder.
///
/// Reads the rendered fit examples out of an encoder prompt and answers with
/// the profile text of the most probable group (ties to the lowest group).
pub struct BayesEncoder {
    id: String,
    lines: HashMap<String, (usize, usize)>,
    log_probs: Vec<Vec<Vec<f64>>>,
    log_weights: Vec<f64>,
    texts: Vec<String>,
}

impl BayesEncoder {
    pub fn new(spec: &GeneratorSpec, template: &ConditioningTemplate) -> Result<Self> {
        spec.validate()?;
        let conditionals = spec.conditionals()?;
        let mut lines = HashMap::new();
        for (j, inst) in spec.instances.iter().enumerate() {
            let instance = Instance::new(&inst.id, &inst.prompt, inst.choices.clone())?;
            for y in 0..instance.arity() {
                let line = template.demonstration(&instance, &Rating::new("", &inst.id, y));
                lines.insert(line, (j, y));
            }
        }
        Ok(BayesEncoder {
            id: format!("synthetic-bayes:{}", spec.name),
            lines,
            log_probs: conditionals
                .iter()
                .map(|conds| {
                    conds
                        .iter()
                        .map(|d| d.probs().iter().map(|p| p.ln()).collect())
                        .collect()
                })
                .collect(),
            log_weights: spec.groups.iter().map(|g| g.weight.ln()).collect(),
            texts: spec.profile_texts(),
        })
    }

    /// Posterior-mode group given rendered prompt text.
    pub fn infer_group(&self, prompt: &str) -> usize {
        let mut score = self.log_weights.clone();
        for line in prompt.lines() {
            if let Some(&(j, y)) = self.lines.get(line) {
                for (g, s) in score.iter_mut().enumerate() {
                    *s += self.log_probs[j][g][y];
                }
            }
        }
        crate::stats::argmax(&score).expect("at least one group")
    }
}

impl EncoderClient for BayesEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        Ok(self.texts[self.infer_group(prompt)].clone())
    }
}

#[cfg(test)]
pub(crate) mod specs {
    use super::*;

    /// `n_groups` groups over `n_instances` binary or ternary instances.
    pub fn mixed(
        n_groups: usize,
        n_instances: usize,
        n_raters: usize,
        ratings_per_rater: usize,
        seed: u64,
    ) -> GeneratorSpec {
        let groups = (0..n_groups)
            .map(|g| GroupSpec {
                id: format!("g{g}"),
                weight: 1.0 / n_groups as f64,
                profile: None,
                demographics: BTreeMap::from([("cohort".to_string(), format!("c{g}"))]),
            })
            .collect();
        let instances = (0..n_instances)
            .map(|j| {
                let arity = 2 + j % 2;
                InstanceSpec {
                    id: format!("i{j:03}"),
                    prompt: format!("question {j}"),
                    choices: (0..arity).map(|y| format!("option {y}")).collect(),
                    group_probs: (0..n_groups)
                        .map(|g| {
                            let raw: Vec<f64> = (0..arity)
                                .map(|y| 1.0 + ((g * 7 + j * 3 + y * 5) % 11) as f64)
                                .collect();
                            let s: f64 = raw.iter().sum();
                            raw.into_iter().map(|x| x / s).collect()
                        })
                        .collect(),
                }
            })
            .collect();
        GeneratorSpec {
            name: format!("mixed-{n_groups}"),
            seed,
            n_raters,
            ratings_per_rater,
            groups,
            instances,
        }
    }
}
