//! Run configuration: TOML file, environment, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use valprof_core::dataset::{DatasetPaths, MIN_RATINGS_PER_RATER};
use valprof_core::par::Execution;
use valprof_core::representations::RepresentationKind;

use crate::error::CliError;

pub const ENV_ENDPOINT: &str = "VALPROF_ENDPOINT";
pub const ENV_TOKEN: &str = "VALPROF_TOKEN";
pub const ENV_CACHE_DIR: &str = "VALPROF_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub strict: bool,
    pub execution: Execution,
    pub representations: Vec<String>,
    /// Reference tag for the info-preserved ratio.
    pub max_examples_tag: Option<String>,
    pub dataset: DatasetConfig,
    pub decoder: DecoderConfig,
    pub encoder: EncoderConfig,
    pub cluster: ClusterConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("valprof-out"),
            strict: false,
            execution: Execution::default(),
            representations: vec!["noinfo".into(), "profile".into()],
            max_examples_tag: None,
            dataset: DatasetConfig::default(),
            decoder: DecoderConfig::default(),
            encoder: EncoderConfig::default(),
            cluster: ClusterConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: String,
    /// Directory holding `instances.jsonl`, `raters.jsonl`, `ratings.jsonl`.
    pub dir: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    pub raters: Option<PathBuf>,
    pub ratings: Option<PathBuf>,
    pub min_ratings: usize,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "dataset".into(),
            dir: None,
            instances: None,
            raters: None,
            ratings: None,
            min_ratings: MIN_RATINGS_PER_RATER,
            test_fraction: 0.5,
        }
    }
}

impl DatasetConfig {
    pub fn paths(&self) -> Option<DatasetPaths> {
        let base = self.dir.as_deref().map(DatasetPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, fallback: Option<PathBuf>| explicit.clone().or(fallback);
        Some(DatasetPaths {
            instances: pick(&self.instances, base.as_ref().map(|b| b.instances.clone()))?,
            raters: pick(&self.raters, base.as_ref().map(|b| b.raters.clone()))?,
            ratings: pick(&self.ratings, base.as_ref().map(|b| b.ratings.clone()))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Http,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub id: Option<String>,
    pub url: Option<String>,
    pub table: Option<PathBuf>,
    pub max_in_flight: usize,
    pub retries: u32,
    pub renormalize: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            kind: DecoderKind::Http,
            id: None,
            url: None,
            table: None,
            max_in_flight: 8,
            retries: 3,
            renormalize: true,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Http,
    /// Pre-computed profiles file.
    Profiles,
    /// In-process posterior-mode encoder over a synthetic generator spec.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub id: Option<String>,
    pub url: Option<String>,
    pub profiles: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub max_profile_chars: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Http,
            id: None,
            url: None,
            profiles: None,
            spec: None,
            max_profile_chars: 8000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_cluster: Vec<usize>,
    /// Size of the seeded candidate-profile pool drawn from train raters.
    pub candidates: usize,
    pub max_iter: usize,
    pub crosstab_variables: Vec<String>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_cluster: vec![2, 4, 8],
            candidates: 100,
            max_iter: valprof_core::clustering::DEFAULT_MAX_ITER,
            crosstab_variables: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub calibration_bins: usize,
    /// Empty means every predicted tag.
    pub calibration_tags: Vec<String>,
    pub agreement_min_raters: usize,
    pub agreement_profiles: usize,
    pub top_k: usize,
    pub interpret_instances: usize,
    pub judge_responses: Option<PathBuf>,
    pub bootstrap_resamples: usize,
    pub uncertainty_tag: String,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            calibration_bins: valprof_core::evaluation::DEFAULT_BINS,
            calibration_tags: vec![],
            agreement_min_raters: 3,
            agreement_profiles: valprof_core::evaluation::DEFAULT_PROFILE_SAMPLE,
            top_k: 1,
            interpret_instances: 100,
            judge_responses: None,
            bootstrap_resamples: 1000,
            uncertainty_tag: "profile".into(),
        }
    }
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub test_fraction: Option<f64>,
    pub representations: Option<Vec<String>>,
    pub decoder_url: Option<String>,
    pub encoder_url: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub n_cluster: Option<Vec<usize>>,
    pub max_iter: Option<usize>,
    pub top_k: Option<usize>,
    pub calibration_bins: Option<usize>,
    pub judge_responses: Option<PathBuf>,
    pub execution: Option<Execution>,
}

/// Environment lookups, injectable for tests.
pub trait Env {
    fn var(&self, key: &str) -> Option<String>;
}

pub struct ProcessEnv;

impl Env for ProcessEnv {
    fn var(&self, key: &str) -> Option<String> {
        std::env::var(key).ok().filter(|v| !v.is_empty())
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parse TOML; relative paths are taken from the file's directory.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        for p in [
            &mut cfg.dataset.dir,
            &mut cfg.dataset.instances,
            &mut cfg.dataset.raters,
            &mut cfg.dataset.ratings,
            &mut cfg.decoder.table,
            &mut cfg.decoder.cache_dir,
            &mut cfg.encoder.profiles,
            &mut cfg.encoder.spec,
            &mut cfg.evaluation.judge_responses,
        ] {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Fill unset endpoint and cache settings from the environment, then
    /// apply command-line overrides.
    pub fn apply(&mut self, env: &dyn Env, o: &Overrides) {
        if let Some(url) = env.var(ENV_ENDPOINT) {
            self.decoder.url.get_or_insert_with(|| url.clone());
            self.encoder.url.get_or_insert(url);
        }
        if let Some(dir) = env.var(ENV_CACHE_DIR) {
            self.decoder.cache_dir.get_or_insert_with(|| PathBuf::from(dir));
        }
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(o.seed, self.seed);
        set!(o.out_dir, self.out_dir);
        set!(o.test_fraction, self.dataset.test_fraction);
        set!(o.representations, self.representations);
        set!(o.n_cluster, self.cluster.n_cluster);
        set!(o.max_iter, self.cluster.max_iter);
        set!(o.top_k, self.evaluation.top_k);
        set!(o.calibration_bins, self.evaluation.calibration_bins);
        set!(o.execution, self.execution);
        if o.decoder_url.is_some() {
            self.decoder.url = o.decoder_url.clone();
        }
        if o.encoder_url.is_some() {
            self.encoder.url = o.encoder_url.clone();
        }
        if o.cache_dir.is_some() {
            self.decoder.cache_dir = o.cache_dir.clone();
        }
        if o.judge_responses.is_some() {
            self.evaluation.judge_responses = o.judge_responses.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.dataset;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return bad(format!(
                "dataset.test_fraction must be in (0, 1), got {}",
                d.test_fraction
            ));
        }
        if d.min_ratings < MIN_RATINGS_PER_RATER {
            return bad(format!("dataset.min_ratings must be at least {MIN_RATINGS_PER_RATER}"));
        }
        let kinds = self.representation_kinds()?;
        if !kinds.contains(&RepresentationKind::NoInfo) {
            return bad("representations must include `noinfo`".into());
        }
        if let Some(tag) = &self.max_examples_tag {
            if !self.representations.contains(tag) {
                return bad(format!("max_examples_tag `{tag}` is not among the representations"));
            }
        }
        match self.decoder.kind {
            DecoderKind::Http if self.decoder.url.is_none() => {
                return bad(format!(
                    "decoder.url is required for an http decoder (or set {ENV_ENDPOINT})"
                ))
            }
            DecoderKind::Table if self.decoder.table.is_none() => {
                return bad("decoder.table is required for a table decoder".into())
            }
            _ => {}
        }
        match self.encoder.kind {
            EncoderKind::Http if self.encoder.url.is_none() => {
                return bad(format!(
                    "encoder.url is required for an http encoder (or set {ENV_ENDPOINT})"
                ))
            }
            EncoderKind::Profiles if self.encoder.profiles.is_none() => {
                return bad("encoder.profiles is required for a profiles encoder".into())
            }
            EncoderKind::Synthetic if self.encoder.spec.is_none() => {
                return bad("encoder.spec is required for a synthetic encoder".into())
            }
            _ => {}
        }
        if self.decoder.max_in_flight == 0 || self.decoder.retries == 0 {
            return bad("decoder.max_in_flight and decoder.retries must be positive".into());
        }
        let c = &self.cluster;
        if c.n_cluster.is_empty() || c.n_cluster.contains(&0) || c.candidates == 0 || c.max_iter == 0 {
            return bad("cluster.n_cluster entries, candidates and max_iter must be positive".into());
        }
        let e = &self.evaluation;
        if e.calibration_bins == 0 || e.top_k == 0 || e.agreement_profiles < 2 || e.agreement_min_raters < 2 {
            return bad("evaluation settings out of range".into());
        }
        if e.bootstrap_resamples == 0 {
            return bad("evaluation.bootstrap_resamples must be positive".into());
        }
        Ok(())
    }

    pub fn representation_kinds(&self) -> Result<Vec<RepresentationKind>, CliError> {
        let mut kinds = Vec::new();
        for tag in &self.representations {
            let kind: RepresentationKind = tag.parse().map_err(|e| CliError::Config(format!("{e}")))?;
            if kind.to_string() != *tag {
                return Err(CliError::Config(format!(
                    "representation `{tag}` should be written `{kind}`"
                )));
            }
            if kinds.contains(&kind) {
                return Err(CliError::Config(format!("representation `{tag}` listed twice")));
            }
            kinds.push(kind);
        }
        Ok(kinds)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.decoder
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
