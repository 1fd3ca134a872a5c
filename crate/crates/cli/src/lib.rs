//! The `valprof` command-line pipeline.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use valprof_core::par::Execution;
use valprof_core::synthetic::{analytic_quantities, generate, GeneratorSpec};

use crate::config::{Env, Overrides, RunConfig};
use crate::error::CliError;
use crate::pipeline::{Pipeline, Stage};

#[derive(Debug, Parser)]
#[command(name = "valprof", version, about = "Value-profile information measurement pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test_fraction: Option<f64>,
    /// Comma-separated representation tags, e.g. `noinfo,ex:4,profile`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub representations: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub decoder_url: Option<String>,
    #[arg(long, global = true)]
    pub encoder_url: Option<String>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Comma-separated cluster counts, e.g. `2,4,8`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub n_cluster: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true)]
    pub calibration_bins: Option<usize>,
    #[arg(long, global = true)]
    pub judge_responses: Option<PathBuf>,
    /// `parallel` or `sequential`.
    #[arg(long, global = true, value_parser = parse_execution)]
    pub execution: Option<Execution>,
}

fn parse_execution(s: &str) -> Result<Execution, String> {
    match s {
        "parallel" => Ok(Execution::Parallel),
        "sequential" => Ok(Execution::Sequential),
        _ => Err(format!("expected `parallel` or `sequential`, got `{s}`")),
    }
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            test_fraction: self.test_fraction,
            representations: self.representations.clone(),
            decoder_url: self.decoder_url.clone(),
            encoder_url: self.encoder_url.clone(),
            cache_dir: self.cache_dir.clone(),
            n_cluster: self.n_cluster.clone(),
            max_iter: self.max_iter,
            top_k: self.top_k,
            calibration_bins: self.calibration_bins,
            judge_responses: self.judge_responses.clone(),
            execution: self.execution,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, filter and split the dataset into train and test raters.
    Ingest,
    /// Split every rater's ratings into fit and eval sets.
    Partition,
    /// Infer a value profile per rater from fit ratings.
    Encode,
    /// Held-out decoder predictions for test raters.
    Predict,
    /// Usable information per representation.
    Info,
    /// Value-epistemic and aleatoric uncertainty.
    Uncertainty,
    /// Reliability bins and expected calibration error.
    Calibrate,
    /// Greedy value-profile clustering for each cluster count.
    Cluster,
    /// Build (and optionally score) the profile interpretability task.
    Interpret,
    /// Estimated versus observed inter-rater agreement.
    Agreement,
    /// Summarize all reports into one document.
    Report,
    /// Run every stage in order.
    Run,
    /// Generate a synthetic population from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Ingest => vec![Stage::Ingest],
            Command::Partition => vec![Stage::Partition],
            Command::Encode => vec![Stage::Encode],
            Command::Predict => vec![Stage::Predict],
            Command::Info => vec![Stage::Info],
            Command::Uncertainty => vec![Stage::Uncertainty],
            Command::Calibrate => vec![Stage::Calibrate],
            Command::Cluster => vec![Stage::Cluster],
            Command::Interpret => vec![Stage::Interpret],
            Command::Agreement => vec![Stage::Agreement],
            Command::Report => vec![Stage::Report],
            Command::Run => Stage::ALL.to_vec(),
            Command::Synth { .. } => vec![],
        }
    }
}

/// Resolve the configuration: file, then environment, then flags.
pub fn resolve_config(global: &GlobalArgs, env: &dyn Env) -> Result<RunConfig, CliError> {
    let mut config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply(env, &global.overrides());
    config.validate()?;
    Ok(config)
}

pub fn execute(cli: &Cli, env: &dyn Env) -> Result<(), CliError> {
    if let Command::Synth { spec, out } = &cli.command {
        let spec = GeneratorSpec::load(spec)?;
        let population = generate(&spec)?;
        population.write_to_dir(out)?;
        valprof_core::io::write_json(
            &out.join("analytic.json"),
            &json!({ "oracle_id": valprof_core::synthetic::oracle_id(&spec), "quantities": analytic_quantities(&spec)? }),
        )?;
        return Ok(());
    }
    let config = resolve_config(&cli.global, env)?;
    let mut pipeline = Pipeline::new(config, env)?;
    pipeline.run(&cli.command.stages())
}

/// Parse arguments, run, and map the outcome to a process exit code. Errors
/// go to stderr as one JSON object.
pub fn main_with_args<I, T>(args: I, env: &dyn Env) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
