//! Pipeline stages. Each stage reads its inputs from the output directory,
//! writes its artifacts there, and fails with a missing-artifact error when an
//! upstream stage has not run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::seq::index;
use serde::Serialize;
use serde_json::json;
use valprof_core::clustering::{
    build_loss_matrix_with, build_probability_tensor, cluster_demographic_crosstab, fit_instances, greedy_cluster,
    random_initialization, CandidateProfile, ClusterReport, GreedyConfig,
};
use valprof_core::dataset::{
    dataset_baselines, filter_min_ratings, load_dataset, partition_all, split_raters, Dataset, DatasetPaths, Instance,
    Rater, RaterPartition,
};
use valprof_core::decoder::{Decoder, DistributionCache, HttpBackend, HttpEncoder, RetryPolicy, TableOracleBackend};
use valprof_core::evaluation::{
    agreement_correlation, build_interpretability_task, calibration_report, difficulty_table, estimated_agreement,
    observed_agreement, replay_item, sample_profiles_for_instance, score_interpretability, write_interpretability_task,
    AgreementReport, AgreementRow, AnswerKey, CalibrationReport, InterpretabilityItem, JudgeResponse,
};
use valprof_core::info::{
    info_report, instance_uncertainties, ledger_from_predictions, uncertainty_decomposition, BootstrapConfig,
    InfoReport, Prediction, Scope, UncertaintyReport,
};
use valprof_core::io::{read_json, read_jsonl, write_csv, write_json, write_jsonl};
use valprof_core::representations::{
    encode_profiles, load_profiles, EncodeSettings, EncoderClient, ProfileRecord, ProfileStore, Renderer,
};
use valprof_core::rng::{derive_seed, stream};
use valprof_core::synthetic::{BayesEncoder, GeneratorSpec};
use valprof_core::{BackendError, Error};

use crate::config::{DecoderKind, EncoderKind, Env, RunConfig, ENV_TOKEN};
use crate::error::CliError;
use crate::manifest::{unix_now, Manifest, RunEntry};

type Result<T> = std::result::Result<T, CliError>;

/// Named sub-seeds; each stage derives its randomness from one of these.
pub const SUB_SEEDS: [&str; 8] = [
    "split",
    "partition",
    "candidates",
    "cluster-init",
    "bootstrap",
    "agreement-sample",
    "interpret-instances",
    "task-order",
];

pub const NOINFO_TAG: &str = "noinfo";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Partition,
    Encode,
    Predict,
    Info,
    Uncertainty,
    Calibrate,
    Cluster,
    Interpret,
    Agreement,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Partition,
        Stage::Encode,
        Stage::Predict,
        Stage::Info,
        Stage::Uncertainty,
        Stage::Calibrate,
        Stage::Cluster,
        Stage::Interpret,
        Stage::Agreement,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Partition => "partition",
            Stage::Encode => "encode",
            Stage::Predict => "predict",
            Stage::Info => "info",
            Stage::Uncertainty => "uncertainty",
            Stage::Calibrate => "calibrate",
            Stage::Cluster => "cluster",
            Stage::Interpret => "interpret",
            Stage::Agreement => "agreement",
            Stage::Report => "report",
        }
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("data").join("train")
    }
    pub fn test_dir(&self) -> PathBuf {
        self.root.join("data").join("test")
    }
    pub fn partitions(&self) -> PathBuf {
        self.root.join("partitions.jsonl")
    }
    pub fn profiles(&self) -> PathBuf {
        self.root.join("profiles.jsonl")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.jsonl")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }
    pub fn clusters(&self) -> PathBuf {
        self.reports().join("clusters")
    }
    pub fn cluster(&self, n: usize) -> PathBuf {
        self.clusters().join(format!("n{n}.json"))
    }
    pub fn interpret(&self) -> PathBuf {
        self.reports().join("interpret")
    }
}

fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { path, producer })
    }
}

struct CountingEncoder<'a> {
    inner: &'a dyn EncoderClient,
    calls: &'a AtomicU64,
}

impl EncoderClient for CountingEncoder<'_> {
    fn encoder_id(&self) -> &str {
        self.inner.encoder_id()
    }

    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(prompt)
    }
}

/// Train and test datasets with per-rater partitions.
struct Split {
    train: Dataset,
    test: Dataset,
    partitions: BTreeMap<String, RaterPartition>,
}

impl Split {
    fn raters(&self) -> BTreeMap<String, Rater> {
        self.train
            .raters()
            .iter()
            .chain(self.test.raters())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn partitions_of(&self, ds: &Dataset) -> BTreeMap<String, RaterPartition> {
        ds.raters()
            .keys()
            .filter_map(|id| self.partitions.get(id).map(|p| (id.clone(), p.clone())))
            .collect()
    }
}

#[derive(Serialize)]
struct UncertaintyCsvRow {
    scope: String,
    total: f64,
    value_epistemic: f64,
    aleatoric: f64,
    epistemic_fraction: f64,
    n: usize,
}

#[derive(Serialize)]
struct CalibrationCsvRow<'a> {
    tag: &'a str,
    confidence_low: f64,
    confidence_high: f64,
    mean_confidence: Option<f64>,
    empirical_accuracy: Option<f64>,
    count: usize,
}

#[derive(Serialize)]
struct RaterCsvRow<'a> {
    rater_id: &'a str,
    split: &'a str,
    cluster: usize,
    difficulty: f64,
    n_fit_ratings: usize,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub layout: Layout,
    token: Option<String>,
    decoder: OnceLock<Decoder>,
    encoder_calls: AtomicU64,
    manifest: Manifest,
}

impl Pipeline {
    pub fn new(config: RunConfig, env: &dyn Env) -> Result<Self> {
        config.validate()?;
        let layout = Layout {
            root: config.out_dir.clone(),
        };
        let sub_seeds = SUB_SEEDS
            .iter()
            .map(|name| (name.to_string(), derive_seed(config.seed, &[name])))
            .collect();
        let manifest = Manifest::open_or_new(&layout.manifest(), &config, sub_seeds);
        Ok(Pipeline {
            config,
            layout,
            token: env.var(ENV_TOKEN),
            decoder: OnceLock::new(),
            encoder_calls: AtomicU64::new(0),
            manifest,
        })
    }

    fn seed(&self, name: &str) -> u64 {
        self.manifest.sub_seeds[name]
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn backend_calls(&self) -> u64 {
        self.decoder.get().map_or(0, Decoder::backend_calls)
    }

    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    /// Run stages in order, recording each in the manifest.
    pub fn run(&mut self, stages: &[Stage]) -> Result<()> {
        for &stage in stages {
            let started = unix_now();
            let (calls0, hits0, enc0) = self.counters();
            log::info!("stage {}", stage.name());
            let outcome = self.stage(stage);
            let (calls1, hits1, enc1) = self.counters();
            self.manifest.runs.push(RunEntry {
                command: stage.name().into(),
                started_unix: started,
                finished_unix: unix_now(),
                backend_calls: calls1 - calls0,
                cache_hits: hits1 - hits0,
                encoder_calls: enc1 - enc0,
            });
            if self.layout.root.exists() {
                self.manifest.save(&self.layout.manifest())?;
            }
            outcome?;
        }
        Ok(())
    }

    fn counters(&self) -> (u64, u64, u64) {
        let (calls, hits) = self
            .decoder
            .get()
            .map_or((0, 0), |d| (d.backend_calls(), d.cache_hits()));
        (calls, hits, self.encoder_calls())
    }

    fn stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Partition => self.partition(),
            Stage::Encode => self.encode(),
            Stage::Predict => self.predict(),
            Stage::Info => self.info(),
            Stage::Uncertainty => self.uncertainty(),
            Stage::Calibrate => self.calibrate(),
            Stage::Cluster => self.cluster(),
            Stage::Interpret => self.interpret(),
            Stage::Agreement => self.agreement(),
            Stage::Report => self.report(),
        }
    }

    fn renderer(&self) -> Renderer {
        Renderer::new(Default::default(), self.config.strict)
    }

    fn decoder(&self) -> Result<&Decoder> {
        if let Some(d) = self.decoder.get() {
            return Ok(d);
        }
        let c = &self.config.decoder;
        let decoder = match c.kind {
            DecoderKind::Http => {
                let url = c.url.as_deref().expect("validated");
                let id = c.id.clone().unwrap_or_else(|| url.to_string());
                Decoder::new(HttpBackend::new(id, url, self.token.clone()))
            }
            DecoderKind::Table => {
                let path = c.table.as_deref().expect("validated");
                let id = c.id.clone().unwrap_or_else(|| format!("table:{}", file_name(path)));
                Decoder::new(TableOracleBackend::load(id, path)?)
            }
        };
        let cache = DistributionCache::open(self.config.cache_dir().join("decoder.jsonl"))?;
        let decoder = decoder
            .with_cache(cache)
            .with_retry(RetryPolicy {
                attempts: c.retries,
                ..Default::default()
            })
            .with_max_in_flight(c.max_in_flight)
            .with_execution(self.config.execution)
            .with_renormalize(c.renormalize);
        Ok(self.decoder.get_or_init(|| decoder))
    }

    fn load_split(&self) -> Result<Split> {
        let load = |dir: PathBuf| -> Result<Dataset> {
            let dir = require(dir, "ingest")?;
            Ok(load_dataset(
                &self.config.dataset.name,
                &DatasetPaths::in_dir(&dir),
                self.config.strict,
            )?)
        };
        let train = load(self.layout.train_dir())?;
        let test = load(self.layout.test_dir())?;
        let path = require(self.layout.partitions(), "partition")?;
        let partitions = read_jsonl::<RaterPartition>(&path, &["rater_id", "fit", "eval"], true)?
            .into_iter()
            .map(|l| (l.value.rater_id.clone(), l.value))
            .collect();
        Ok(Split {
            train,
            test,
            partitions,
        })
    }

    fn load_profiles(&self) -> Result<BTreeMap<String, String>> {
        Ok(load_profiles(&require(self.layout.profiles(), "encode")?)?)
    }

    fn load_predictions(&self) -> Result<Vec<Prediction>> {
        let path = require(self.layout.predictions(), "predict")?;
        Ok(read_jsonl::<Prediction>(
            &path,
            &["rater_id", "instance_id", "representation_tag", "observed", "probs"],
            true,
        )?
        .into_iter()
        .map(|l| l.value)
        .collect())
    }

    pub fn ingest(&mut self) -> Result<()> {
        let d = &self.config.dataset;
        let paths = d.paths().ok_or_else(|| {
            CliError::Config("dataset.dir or all of dataset.instances/raters/ratings must be set".into())
        })?;
        let full = load_dataset(&d.name, &paths, self.config.strict)?;
        let filtered = filter_min_ratings(&full, d.min_ratings)?;
        log::info!(
            "{} of {} raters have at least {} ratings",
            filtered.raters().len(),
            full.raters().len(),
            d.min_ratings
        );
        let (train, test) = split_raters(&filtered, d.test_fraction, self.seed("split"))?;
        for p in [&paths.instances, &paths.raters, &paths.ratings] {
            self.manifest.record_input(p)?;
        }
        train.write_to_dir(&self.layout.train_dir())?;
        test.write_to_dir(&self.layout.test_dir())?;
        write_json(
            &self.layout.report("baselines.json"),
            &json!({
                "raters": filtered.raters().len(),
                "raters_dropped": full.raters().len() - filtered.raters().len(),
                "train_raters": train.raters().len(),
                "test_raters": test.raters().len(),
                "instances": filtered.instances().len(),
                "ratings": filtered.n_ratings(),
                "train": dataset_baselines(&train)?,
                "test": dataset_baselines(&test)?,
            }),
        )?;
        Ok(())
    }

    pub fn partition(&mut self) -> Result<()> {
        let seed = self.seed("partition");
        let mut all = BTreeMap::new();
        for dir in [self.layout.train_dir(), self.layout.test_dir()] {
            let dir = require(dir, "ingest")?;
            let ds = load_dataset(
                &self.config.dataset.name,
                &DatasetPaths::in_dir(&dir),
                self.config.strict,
            )?;
            all.extend(partition_all(&ds, seed)?);
        }
        write_jsonl(&self.layout.partitions(), all.values())?;
        Ok(())
    }

    pub fn encode(&mut self) -> Result<()> {
        let split = self.load_split()?;
        let raters = split.raters();
        let records: Vec<ProfileRecord> = match self.config.encoder.kind {
            EncoderKind::Profiles => {
                let path = self.config.encoder.profiles.clone().expect("validated");
                self.manifest.record_input(&path)?;
                let given = load_profiles(&path)?;
                let missing: Vec<&String> = raters.keys().filter(|id| !given.contains_key(*id)).collect();
                if !missing.is_empty() {
                    return Err(Error::Integrity(format!(
                        "{} raters have no profile in {} (first: `{}`)",
                        missing.len(),
                        path.display(),
                        missing[0]
                    ))
                    .into());
                }
                raters
                    .keys()
                    .map(|id| ProfileRecord {
                        rater_id: id.clone(),
                        profile_text: given[id].clone(),
                        encoder_id: format!("file:{}", file_name(&path)),
                        fit_fingerprint: split.partitions[id].fingerprint(),
                    })
                    .collect()
            }
            kind => {
                let renderer = self.renderer();
                let encoder: Box<dyn EncoderClient> = match kind {
                    EncoderKind::Http => {
                        let url = self.config.encoder.url.as_deref().expect("validated");
                        let id = self.config.encoder.id.clone().unwrap_or_else(|| url.to_string());
                        Box::new(HttpEncoder::new(id, url, self.token.clone()))
                    }
                    _ => {
                        let path = self.config.encoder.spec.clone().expect("validated");
                        self.manifest.record_input(&path)?;
                        Box::new(BayesEncoder::new(&GeneratorSpec::load(&path)?, &renderer.template)?)
                    }
                };
                let counting = CountingEncoder {
                    inner: encoder.as_ref(),
                    calls: &self.encoder_calls,
                };
                let store = ProfileStore::open(self.config.cache_dir().join("profiles.jsonl"))?;
                let jobs: Vec<(&Rater, &RaterPartition)> = raters
                    .values()
                    .map(|r| {
                        split
                            .partitions
                            .get(&r.id)
                            .map(|p| (r, p))
                            .ok_or_else(|| Error::Integrity(format!("rater `{}` has no partition", r.id)))
                    })
                    .collect::<std::result::Result<_, _>>()?;
                let settings = EncodeSettings {
                    retry: RetryPolicy {
                        attempts: self.config.decoder.retries,
                        ..Default::default()
                    },
                    max_profile_chars: self.config.encoder.max_profile_chars,
                };
                let instances: BTreeMap<String, Instance> = split.train.instances().clone();
                let texts = encode_profiles(
                    &jobs,
                    &instances,
                    &renderer,
                    &counting,
                    &store,
                    &settings,
                    self.config.decoder.max_in_flight,
                    self.config.execution,
                );
                jobs.iter()
                    .zip(texts)
                    .map(|((r, p), text)| {
                        Ok(ProfileRecord {
                            rater_id: r.id.clone(),
                            profile_text: text?,
                            encoder_id: encoder.encoder_id().to_string(),
                            fit_fingerprint: p.fingerprint(),
                        })
                    })
                    .collect::<std::result::Result<_, Error>>()?
            }
        };
        write_jsonl(&self.layout.profiles(), &records)?;
        Ok(())
    }

    pub fn predict(&mut self) -> Result<()> {
        let split = self.load_split()?;
        let kinds = self.config.representation_kinds()?;
        let profiles = if kinds.iter().any(|k| k.needs_profile()) {
            self.load_profiles()?
        } else {
            BTreeMap::new()
        };
        let test_partitions = split.partitions_of(&split.test);
        let predictions = valprof_core::info::held_out_predictions(
            &split.test,
            &test_partitions,
            &kinds,
            &profiles,
            &self.renderer(),
            self.decoder()?,
        )?;
        write_jsonl(&self.layout.predictions(), &predictions)?;
        Ok(())
    }

    pub fn info(&mut self) -> Result<()> {
        let ledger = ledger_from_predictions(&self.load_predictions()?)?;
        let config = BootstrapConfig {
            resamples: self.config.evaluation.bootstrap_resamples,
            seed: self.seed("bootstrap"),
            execution: self.config.execution,
            ..Default::default()
        };
        let report = info_report(&ledger, NOINFO_TAG, self.config.max_examples_tag.as_deref(), &config)?;
        write_json(&self.layout.report("info.json"), &report)?;
        report.write_csv(&self.layout.report("info.csv"))?;
        Ok(())
    }

    pub fn uncertainty(&mut self) -> Result<()> {
        let ledger = ledger_from_predictions(&self.load_predictions()?)?;
        let tag = &self.config.evaluation.uncertainty_tag;
        let dataset = uncertainty_decomposition(&ledger, NOINFO_TAG, tag, Scope::Dataset)?;
        let instances = instance_uncertainties(&ledger, NOINFO_TAG, tag)?;
        write_json(
            &self.layout.report("uncertainty.json"),
            &json!({ "profile_tag": tag, "dataset": dataset, "instances": instances }),
        )?;
        let rows: Vec<UncertaintyCsvRow> = std::iter::once(&dataset)
            .chain(&instances)
            .map(|r: &UncertaintyReport| UncertaintyCsvRow {
                scope: r.scope.key(),
                total: r.total,
                value_epistemic: r.value_epistemic,
                aleatoric: r.aleatoric,
                epistemic_fraction: r.epistemic_fraction(),
                n: r.n,
            })
            .collect();
        write_csv(&self.layout.report("uncertainty.csv"), &rows)?;
        Ok(())
    }

    pub fn calibrate(&mut self) -> Result<()> {
        let predictions = self.load_predictions()?;
        let present: BTreeSet<&str> = predictions.iter().map(|p| p.representation_tag.as_str()).collect();
        let tags: Vec<&str> = if self.config.evaluation.calibration_tags.is_empty() {
            present.iter().copied().collect()
        } else {
            self.config
                .evaluation
                .calibration_tags
                .iter()
                .map(String::as_str)
                .collect()
        };
        let mut reports: BTreeMap<&str, CalibrationReport> = BTreeMap::new();
        for tag in tags {
            if !present.contains(tag) {
                return Err(CliError::Config(format!("no predictions for calibration tag `{tag}`")));
            }
            let pairs: Vec<_> = predictions
                .iter()
                .filter(|p| p.representation_tag == tag)
                .map(|p| (p.probs.clone(), p.observed))
                .collect();
            reports.insert(
                tag,
                calibration_report(&pairs, self.config.evaluation.calibration_bins)?,
            );
        }
        write_json(&self.layout.report("calibration.json"), &reports)?;
        let rows: Vec<CalibrationCsvRow> = reports
            .iter()
            .flat_map(|(tag, r)| {
                r.bins.iter().map(move |b| CalibrationCsvRow {
                    tag,
                    confidence_low: b.confidence_low,
                    confidence_high: b.confidence_high,
                    mean_confidence: b.mean_confidence,
                    empirical_accuracy: b.empirical_accuracy,
                    count: b.count,
                })
            })
            .collect();
        write_csv(&self.layout.report("calibration.csv"), &rows)?;
        Ok(())
    }

    /// Seeded sample of train-rater profiles, in rater order.
    fn candidates(&self, split: &Split, profiles: &BTreeMap<String, String>) -> Result<Vec<CandidateProfile>> {
        let pool: Vec<(&String, &String)> = split
            .train
            .raters()
            .keys()
            .map(|id| {
                profiles
                    .get(id)
                    .map(|t| (id, t))
                    .ok_or_else(|| Error::Integrity(format!("train rater `{id}` has no profile")))
            })
            .collect::<std::result::Result<_, _>>()?;
        let n = self.config.cluster.candidates.min(pool.len());
        let mut picked = index::sample(&mut stream(self.seed("candidates"), &[]), pool.len(), n).into_vec();
        picked.sort_unstable();
        Ok(picked
            .into_iter()
            .map(|i| CandidateProfile {
                id: pool[i].0.clone(),
                text: pool[i].1.clone(),
            })
            .collect())
    }

    pub fn cluster(&mut self) -> Result<()> {
        let split = self.load_split()?;
        let profiles = self.load_profiles()?;
        let candidates = self.candidates(&split, &profiles)?;
        for &n in &self.config.cluster.n_cluster {
            if n > candidates.len() {
                return Err(CliError::Config(format!(
                    "n_cluster {n} exceeds the {} available candidate profiles",
                    candidates.len()
                )));
            }
        }
        let instances = fit_instances(split.partitions.values(), split.train.instances())?;
        let tensor = build_probability_tensor(&instances, &candidates, self.decoder()?)?;
        let exec = self.config.execution;
        let train_parts: Vec<&RaterPartition> = split.train.raters().keys().map(|id| &split.partitions[id]).collect();
        let test_parts: Vec<&RaterPartition> = split.test.raters().keys().map(|id| &split.partitions[id]).collect();
        let l_train = build_loss_matrix_with(&tensor, &train_parts, exec)?;
        let l_test = build_loss_matrix_with(&tensor, &test_parts, exec)?;
        let greedy = GreedyConfig {
            max_iter: self.config.cluster.max_iter,
            execution: exec,
        };
        let raters = split.raters();
        let variables: Vec<String> = if self.config.cluster.crosstab_variables.is_empty() {
            raters
                .values()
                .flat_map(|r| r.demographics.keys().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        } else {
            self.config.cluster.crosstab_variables.clone()
        };
        let dir = self.layout.clusters();
        for &n in &self.config.cluster.n_cluster {
            let init = random_initialization(candidates.len(), n, self.seed("cluster-init"))?;
            let result = greedy_cluster(&l_train, n, &init, &greedy)?;
            let report: ClusterReport = result.report(&l_train, &candidates);

            let mut assignments = report.assignments.clone();
            let mut rows = Vec::new();
            for (split_name, l, parts) in [("train", &l_train, &train_parts), ("test", &l_test, &test_parts)] {
                let counts: Vec<usize> = parts.iter().map(|p| p.fit.len()).collect();
                for d in difficulty_table(l, &result.clusters, &counts)? {
                    let i = l.rater_ids().iter().position(|r| *r == d.rater_id).expect("row of l");
                    let losses: Vec<f64> = result.clusters.iter().map(|&v| l.get(i, v)).collect();
                    let cluster = valprof_core::clustering::assign_rater(&losses)?;
                    assignments.insert(d.rater_id.clone(), cluster);
                    rows.push((split_name, d, cluster));
                }
            }
            write_json(
                &self.layout.cluster(n),
                &json!({
                    "n_cluster": n,
                    "candidates": candidates.len(),
                    "initial": init,
                    "result": report,
                    "test_assignments": assignments
                        .iter()
                        .filter(|(id, _)| split.test.raters().contains_key(*id))
                        .collect::<BTreeMap<_, _>>(),
                }),
            )?;
            let csv_rows: Vec<RaterCsvRow> = rows
                .iter()
                .map(|(s, d, c)| RaterCsvRow {
                    rater_id: &d.rater_id,
                    split: s,
                    cluster: *c,
                    difficulty: d.difficulty,
                    n_fit_ratings: d.n_ratings,
                })
                .collect();
            write_csv(&dir.join(format!("n{n}_raters.csv")), &csv_rows)?;
            for var in &variables {
                let table = cluster_demographic_crosstab(&assignments, &raters, var, n);
                table.write_csv(&dir.join(format!("n{n}_crosstab_{var}.csv")))?;
            }
        }
        Ok(())
    }

    pub fn interpret(&mut self) -> Result<()> {
        let split = self.load_split()?;
        let n = *self.config.cluster.n_cluster.iter().max().expect("validated");
        let cluster_path = require(self.layout.cluster(n), "cluster")?;
        let stored: serde_json::Value = read_json(&cluster_path)?;
        let report: ClusterReport = serde_json::from_value(stored["result"].clone()).map_err(Error::from)?;
        let candidates = report.clusters;

        let all: Vec<&Instance> = split.test.instances().values().collect();
        let k = self.config.evaluation.interpret_instances.min(all.len());
        let mut picked = index::sample(&mut stream(self.seed("interpret-instances"), &[]), all.len(), k).into_vec();
        picked.sort_unstable();

        let decoder = self.decoder()?;
        let mut items: Vec<InterpretabilityItem> = Vec::new();
        for j in picked {
            items.extend(build_interpretability_task(
                all[j],
                &candidates,
                decoder,
                self.config.evaluation.top_k,
                self.seed("task-order"),
            )?);
        }
        let dir = self.layout.interpret();
        write_interpretability_task(&items, &dir.join("tasks.jsonl"), &dir.join("keys.jsonl"))?;
        let mut verified = 0;
        for item in &items {
            if replay_item(item, &all_instance(&split, &item.instance_id)?, decoder)? {
                verified += 1;
            }
        }
        let mut summary = json!({
            "n_cluster": n,
            "items": items.len(),
            "low_contrast": items.iter().filter(|i| i.low_contrast).count(),
            "replay_verified": verified,
        });
        if let Some(path) = &self.config.evaluation.judge_responses {
            self.manifest.record_input(path)?;
            let keys: Vec<AnswerKey> = read_jsonl(&dir.join("keys.jsonl"), &["item_id", "answer"], true)?
                .into_iter()
                .map(|l| l.value)
                .collect();
            let responses: Vec<JudgeResponse> = read_jsonl(path, &["item_id", "choice"], self.config.strict)?
                .into_iter()
                .map(|l| l.value)
                .collect();
            let score = score_interpretability(&keys, &responses)?;
            write_json(&dir.join("score.json"), &score)?;
            summary["score"] = json!(score);
        }
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(())
    }

    pub fn agreement(&mut self) -> Result<()> {
        let split = self.load_split()?;
        let profiles = self.load_profiles()?;
        let train_profiles: BTreeMap<String, String> = profiles
            .into_iter()
            .filter(|(id, _)| split.train.raters().contains_key(id))
            .collect();
        let decoder = self.decoder()?;
        let e = &self.config.evaluation;
        let mut labels: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for r in split.train.ratings().chain(split.test.ratings()) {
            labels.entry(r.instance_id.as_str()).or_default().push(r.choice_index);
        }
        let mut rows = Vec::new();
        for (instance_id, labels) in &labels {
            let Some(observed) = observed_agreement(labels, e.agreement_min_raters) else {
                continue;
            };
            let sample = sample_profiles_for_instance(
                &train_profiles,
                &split.partitions,
                instance_id,
                e.agreement_profiles,
                self.seed("agreement-sample"),
            );
            if sample.len() < 2 {
                continue;
            }
            let instance = all_instance(&split, instance_id)?;
            rows.push(AgreementRow {
                instance_id: instance_id.to_string(),
                estimated: estimated_agreement(&instance, &sample, decoder)?,
                observed,
                n_raters: labels.len(),
            });
        }
        let summary = match agreement_correlation(&rows) {
            Ok(fit) => Some(fit),
            Err(err) => {
                log::warn!("no agreement regression: {err}");
                None
            }
        };
        let report = AgreementReport { rows, summary };
        write_json(&self.layout.report("agreement.json"), &report)?;
        report.write_csv(&self.layout.report("agreement.csv"))?;
        Ok(())
    }

    /// One summary document over every stage's report.
    pub fn report(&mut self) -> Result<()> {
        let read = |path: PathBuf, producer: &'static str| -> Result<serde_json::Value> {
            Ok(read_json(&require(path, producer)?)?)
        };
        let info: InfoReport =
            serde_json::from_value(read(self.layout.report("info.json"), "info")?).map_err(Error::from)?;
        let uncertainty = read(self.layout.report("uncertainty.json"), "uncertainty")?;
        let calibration: BTreeMap<String, CalibrationReport> =
            serde_json::from_value(read(self.layout.report("calibration.json"), "calibrate")?).map_err(Error::from)?;
        let mut clusters = BTreeMap::new();
        for &n in &self.config.cluster.n_cluster {
            let c = read(self.layout.cluster(n), "cluster")?;
            clusters.insert(
                n.to_string(),
                json!({
                    "objective": c["result"]["objective"],
                    "iterations": c["result"]["iterations"],
                    "converged": c["result"]["converged"],
                    "profiles": c["result"]["clusters"],
                }),
            );
        }
        let interpret = read(self.layout.interpret().join("summary.json"), "interpret")?;
        let agreement: AgreementReport =
            serde_json::from_value(read(self.layout.report("agreement.json"), "agreement")?).map_err(Error::from)?;
        let baselines = read(self.layout.report("baselines.json"), "ingest")?;
        write_json(
            &self.layout.report("report.json"),
            &json!({
                "dataset": self.config.dataset.name,
                "baselines": baselines,
                "info": info.rows,
                "uncertainty": uncertainty["dataset"],
                "ece": calibration.iter().map(|(t, r)| (t.clone(), r.ece)).collect::<BTreeMap<_, _>>(),
                "clusters": clusters,
                "interpretability": interpret,
                "agreement": { "instances": agreement.rows.len(), "fit": agreement.summary },
            }),
        )?;
        Ok(())
    }
}

fn all_instance(split: &Split, id: &str) -> Result<Instance> {
    split
        .test
        .instance(id)
        .or_else(|| split.train.instance(id))
        .cloned()
        .ok_or_else(|| Error::Integrity(format!("unknown instance `{id}`")).into())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
