//! Value-profile cluster selection by greedy coordinate descent.
//!
//! Given a loss matrix `L[rater][profile]`, pick `n` profiles minimizing
//! `Σ_i min_{v ∈ C} L[i][v]`. Each coordinate of `C` is replaced in turn by
//! the exact best candidate with the others held fixed, until a full sweep
//! leaves `C` unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{Instance, Rater, RaterPartition, Rating};
use crate::decoder::{ChoiceDistribution, Decoder, Query};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::par::Execution;
use crate::rng;
use crate::stats::argmin;

pub const DEFAULT_MAX_ITER: usize = 25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateProfile {
    pub id: String,
    pub text: String,
}

/// Decoder outputs for every (instance, candidate profile) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTensor {
    instance_ids: Vec<String>,
    profile_ids: Vec<String>,
    index: HashMap<String, usize>,
    cells: Vec<ChoiceDistribution>,
}

impl ProbabilityTensor {
    pub fn n_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn n_profiles(&self) -> usize {
        self.profile_ids.len()
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn profile_ids(&self) -> &[String] {
        &self.profile_ids
    }

    pub fn instance_index(&self, instance_id: &str) -> Option<usize> {
        self.index.get(instance_id).copied()
    }

    pub fn get(&self, instance: usize, profile: usize) -> &ChoiceDistribution {
        &self.cells[instance * self.profile_ids.len() + profile]
    }

    /// Total loss of `ratings` under each profile.
    pub fn rating_losses(&self, ratings: &[Rating]) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.n_profiles()];
        for rating in ratings {
            let j = self.instance_index(&rating.instance_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "instance `{}` is not in the probability tensor",
                    rating.instance_id
                ))
            })?;
            for (k, slot) in row.iter_mut().enumerate() {
                *slot += self.get(j, k).nll(rating.choice_index)?;
            }
        }
        Ok(row)
    }
}

/// Unique instances across the fit sets, in id order.
pub fn fit_instances<'a>(
    partitions: impl IntoIterator<Item = &'a RaterPartition>,
    instances: &'a BTreeMap<String, Instance>,
) -> Result<Vec<&'a Instance>> {
    let ids: BTreeSet<&str> = partitions
        .into_iter()
        .flat_map(|p| p.fit.iter().map(|r| r.instance_id.as_str()))
        .collect();
    ids.into_iter()
        .map(|id| {
            instances
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("fit rating references unknown instance `{id}`")))
        })
        .collect()
}

/// Query the decoder for every (instance, candidate) cell.
///
/// Failed cells are collected and reported together.
pub fn build_probability_tensor(
    instances: &[&Instance],
    candidates: &[CandidateProfile],
    decoder: &Decoder,
) -> Result<ProbabilityTensor> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate profiles"));
    }
    if instances.is_empty() {
        return Err(Error::Empty("instances"));
    }
    let queries: Vec<Query> = instances
        .iter()
        .flat_map(|inst| candidates.iter().map(move |c| Query::new(inst, &c.text)))
        .collect();
    let results = decoder.predict_batch(&queries);
    let mut cells = Vec::with_capacity(results.len());
    let mut missing = Vec::new();
    for (n, result) in results.into_iter().enumerate() {
        let (j, k) = (n / candidates.len(), n % candidates.len());
        match result {
            Ok(dist) => cells.push(dist),
            Err(e) => {
                log::warn!("cell ({}, {}) failed: {e}", instances[j].id, candidates[k].id);
                missing.push((instances[j].id.clone(), candidates[k].id.clone()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    let instance_ids: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
    let index = instance_ids.iter().enumerate().map(|(j, id)| (id.clone(), j)).collect();
    Ok(ProbabilityTensor {
        instance_ids,
        profile_ids: candidates.iter().map(|c| c.id.clone()).collect(),
        index,
        cells,
    })
}

/// Row-major `raters × profiles` table of total losses in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMatrix {
    rater_ids: Vec<String>,
    profile_ids: Vec<String>,
    values: Vec<f64>,
}

impl LossMatrix {
    pub fn new(rater_ids: Vec<String>, profile_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != rater_ids.len() * profile_ids.len() {
            return Err(Error::InvalidArgument(
                "loss matrix shape does not match its labels".into(),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss entries must be finite and >= 0, got {bad}"
            )));
        }
        Ok(LossMatrix {
            rater_ids,
            profile_ids,
            values,
        })
    }

    /// Unlabelled matrix from rows; raters and profiles are named by index.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument("ragged loss matrix".into()));
        }
        Self::new(
            (0..rows.len()).map(|i| i.to_string()).collect(),
            (0..width).map(|k| k.to_string()).collect(),
            rows.concat(),
        )
    }

    pub fn n_raters(&self) -> usize {
        self.rater_ids.len()
    }

    pub fn n_profiles(&self) -> usize {
        self.profile_ids.len()
    }

    pub fn rater_ids(&self) -> &[String] {
        &self.rater_ids
    }

    pub fn profile_ids(&self) -> &[String] {
        &self.profile_ids
    }

    #[inline]
    pub fn get(&self, rater: usize, profile: usize) -> f64 {
        self.values[rater * self.profile_ids.len() + profile]
    }

    pub fn row(&self, rater: usize) -> &[f64] {
        let w = self.profile_ids.len();
        &self.values[rater * w..(rater + 1) * w]
    }

    /// `Σ_i min_{v ∈ clusters} L[i][v]`, summed in rater order.
    pub fn objective(&self, clusters: &[usize]) -> f64 {
        (0..self.n_raters())
            .map(|i| clusters.iter().map(|&v| self.get(i, v)).fold(f64::INFINITY, f64::min))
            .sum()
    }
}

pub fn build_loss_matrix(tensor: &ProbabilityTensor, partitions: &[&RaterPartition]) -> Result<LossMatrix> {
    build_loss_matrix_with(tensor, partitions, Execution::default())
}

pub fn build_loss_matrix_with(
    tensor: &ProbabilityTensor,
    partitions: &[&RaterPartition],
    execution: Execution,
) -> Result<LossMatrix> {
    let rows = execution.map_slice(partitions, |p| tensor.rating_losses(&p.fit));
    let mut values = Vec::with_capacity(partitions.len() * tensor.n_profiles());
    for row in rows {
        values.extend(row?);
    }
    LossMatrix::new(
        partitions.iter().map(|p| p.rater_id.clone()).collect(),
        tensor.profile_ids.clone(),
        values,
    )
}

/// Seeded uniform sample of `n` distinct candidate indices.
pub fn random_initialization(n_profiles: usize, n_cluster: usize, seed: u64) -> Result<Vec<usize>> {
    if n_cluster == 0 || n_cluster > n_profiles {
        return Err(Error::InvalidArgument(format!(
            "n_cluster must be in 1..={n_profiles}, got {n_cluster}"
        )));
    }
    let mut rng = rng::stream(seed, &["cluster-init", &n_cluster.to_string()]);
    Ok(index::sample(&mut rng, n_profiles, n_cluster).into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub max_iter: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig {
            max_iter: DEFAULT_MAX_ITER,
            execution: Execution::default(),
        }
    }
}

/// One coordinate update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub sweep: usize,
    pub position: usize,
    pub previous: usize,
    pub chosen: usize,
    pub objective_before: f64,
    pub objective_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Chosen profile indices, by cluster position.
    pub clusters: Vec<usize>,
    /// Cluster position per rater, in matrix row order.
    pub assignments: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub trace: Vec<Step>,
}

/// Total assignment loss of every candidate at one position, others fixed.
///
/// `best_other[i]` is rater `i`'s smallest loss over the other positions.
fn scan_position(l: &LossMatrix, best_other: &[f64], execution: Execution) -> Vec<f64> {
    execution.map_range(l.n_profiles(), |v| {
        (0..l.n_raters()).map(|i| best_other[i].min(l.get(i, v))).sum()
    })
}

pub fn greedy_cluster(
    l: &LossMatrix,
    n_cluster: usize,
    initial: &[usize],
    config: &GreedyConfig,
) -> Result<ClusterResult> {
    let n_v = l.n_profiles();
    if l.n_raters() == 0 || n_v == 0 {
        return Err(Error::Empty("loss matrix"));
    }
    if n_cluster == 0 || n_cluster > n_v {
        return Err(Error::InvalidArgument(format!(
            "n_cluster must be in 1..={n_v}, got {n_cluster}"
        )));
    }
    let distinct: BTreeSet<usize> = initial.iter().copied().collect();
    if initial.len() != n_cluster || distinct.len() != n_cluster || initial.iter().any(|&v| v >= n_v) {
        return Err(Error::InvalidArgument(format!(
            "initial clusters must be {n_cluster} distinct indices below {n_v}"
        )));
    }

    let mut clusters = initial.to_vec();
    let mut objective = l.objective(&clusters);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iter {
        iterations += 1;
        let before_sweep = clusters.clone();
        for c in 0..n_cluster {
            let others: Vec<usize> = clusters
                .iter()
                .enumerate()
                .filter(|(p, _)| *p != c)
                .map(|(_, &v)| v)
                .collect();
            let best_other: Vec<f64> = (0..l.n_raters())
                .map(|i| others.iter().map(|&v| l.get(i, v)).fold(f64::INFINITY, f64::min))
                .collect();
            let mut costs = scan_position(l, &best_other, config.execution);
            for &v in &others {
                costs[v] = f64::INFINITY;
            }
            let chosen = argmin(&costs).expect("non-empty candidate set");
            trace.push(Step {
                sweep: iterations,
                position: c,
                previous: clusters[c],
                chosen,
                objective_before: objective,
                objective_after: costs[chosen],
            });
            clusters[c] = chosen;
            objective = costs[chosen];
        }
        if clusters == before_sweep {
            converged = true;
            break;
        }
    }

    let assignments = (0..l.n_raters())
        .map(|i| {
            let losses: Vec<f64> = clusters.iter().map(|&v| l.get(i, v)).collect();
            assign_rater(&losses)
        })
        .collect::<Result<_>>()?;
    Ok(ClusterResult {
        objective: l.objective(&clusters),
        clusters,
        assignments,
        iterations,
        converged,
        trace,
    })
}

/// Cluster position with the smallest loss; ties go to the lowest position.
pub fn assign_rater(cluster_losses: &[f64]) -> Result<usize> {
    argmin(cluster_losses).ok_or(Error::Empty("clusters"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<CandidateProfile>,
    pub assignments: BTreeMap<String, usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterResult {
    pub fn report(&self, l: &LossMatrix, candidates: &[CandidateProfile]) -> ClusterReport {
        ClusterReport {
            clusters: self.clusters.iter().map(|&v| candidates[v].clone()).collect(),
            assignments: l
                .rater_ids()
                .iter()
                .cloned()
                .zip(self.assignments.iter().copied())
                .collect(),
            objective: self.objective,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

pub const UNKNOWN_CATEGORY: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstabRow {
    pub cluster: usize,
    pub counts: Vec<usize>,
    pub shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crosstab {
    pub variable: String,
    pub categories: Vec<String>,
    pub rows: Vec<CrosstabRow>,
}

#[derive(Serialize)]
struct CrosstabCsvRow<'a> {
    cluster: usize,
    category: &'a str,
    count: usize,
    share: f64,
}

impl Crosstab {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<CrosstabCsvRow> = self
            .rows
            .iter()
            .flat_map(|r| {
                self.categories.iter().enumerate().map(move |(c, cat)| CrosstabCsvRow {
                    cluster: r.cluster,
                    category: cat,
                    count: r.counts[c],
                    share: r.shares[c],
                })
            })
            .collect();
        write_csv(path, &rows)
    }
}

/// Counts and row shares of one demographic variable per cluster.
///
/// Raters without the variable land in the `unknown` category. Empty clusters
/// get all-zero shares.
pub fn cluster_demographic_crosstab(
    assignments: &BTreeMap<String, usize>,
    raters: &BTreeMap<String, Rater>,
    variable: &str,
    n_clusters: usize,
) -> Crosstab {
    let category_of = |id: &str| {
        raters
            .get(id)
            .and_then(|r| r.demographics.get(variable))
            .map_or(UNKNOWN_CATEGORY, String::as_str)
    };
    let categories: Vec<String> = assignments
        .keys()
        .map(|id| category_of(id).to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut counts = vec![vec![0usize; categories.len()]; n_clusters];
    for (id, &cluster) in assignments {
        let c = categories
            .binary_search_by(|x| x.as_str().cmp(category_of(id)))
            .expect("collected above");
        counts[cluster][c] += 1;
    }
    let rows = counts
        .into_iter()
        .enumerate()
        .map(|(cluster, counts)| {
            let total: usize = counts.iter().sum();
            let shares = counts
                .iter()
                .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
                .collect();
            CrosstabRow {
                cluster,
                counts,
                shares,
            }
        })
        .collect();
    Crosstab {
        variable: variable.into(),
        categories,
        rows,
    }
}
