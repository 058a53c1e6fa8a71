//! Command-line runner: each verb reads one JSON config and writes its
//! outputs atomically into `--out`.

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use boundmap_core::attacks::{adversarial_train, perturbation_log_csv};
use boundmap_core::datasets::{gen_t1_with_rotation, gen_t2_with_rotation, write_idx, LabeledDataset, T1Params, T2Params};
use boundmap_core::experiments::{
    config_hash, derive_seed, run_elasticity, run_forgetting, run_support, run_table1, run_transition, CsvFile, ElasticityConfig,
    ForgettingConfig, ModelSpec, SupportConfig, Table1Config, TransitionConfig,
};
use boundmap_core::io_util::write_atomic;
use boundmap_core::margins::{csv_preamble, energy_csv, energy_profiles, measure_campaign, records_csv, summaries_csv, summarize};
use boundmap_core::models::{finetune, history_csv, train_sgd};
use boundmap_core::theory::run_theory;
use boundmap_core::{Error, Model, OrthonormalMatrix, TheoryConfig, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{read_config, AdvTrainRunConfig, DataRef, GenDataConfig, GenSpec, MeasureRunConfig, OutputFormat, TrainRunConfig};

#[derive(Debug, Parser)]
#[command(name = "boundmap", version, about = "Decision-boundary margin measurement along subspaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel measurement and attacks.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset or transform an existing one.
    GenData,
    /// Train a model with SGD.
    Train,
    /// Adversarially train a model with projected L2 PGD.
    Advtrain,
    /// Measure subspace-constrained margins of a checkpoint.
    Measure,
    /// Check the margin-ratio law of the one-step linear classifier.
    Theory,
    /// Run a scripted experiment recipe.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Table1,
    Transition,
    Elasticity,
    Forgetting,
    Support,
}

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::DimensionMismatch { .. }
            | Error::InvalidParameter(_)
            | Error::WindowTooLarge { .. }
            | Error::TooManyDimensions { .. }
            | Error::BandOutOfRange { .. }
            | Error::InvalidClass { .. }
            | Error::Empty(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        // a second call within one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let path = cli.config.as_deref().ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let out = Outputs::create(&cli.out)?;
    let started = unix_time();
    let label = match &cli.command {
        Command::GenData => cmd_gen_data(&load(path, cli.seed)?, &out),
        Command::Train => cmd_train(&load(path, cli.seed)?, &out),
        Command::Advtrain => cmd_advtrain(&load(path, cli.seed)?, &out),
        Command::Measure => cmd_measure(&load(path, cli.seed)?, &out),
        Command::Theory => cmd_theory(&load(path, cli.seed)?, &out),
        Command::Experiment { name } => cmd_experiment(*name, path, cli.seed, &out),
    }?;
    out.log(&format!("{started} {label} started\n{} {label} finished\n", unix_time()))
}

fn load<T: serde::de::DeserializeOwned>(path: &Path, seed: Option<u64>) -> CliResult<T> {
    read_config(path, seed).map_err(CliError::Validation)
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Output directory handle; every file goes through an atomic rename.
pub struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        Ok(write_atomic(&self.path(name), bytes)?)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn csvs(&self, files: &[CsvFile]) -> CliResult<()> {
        files.iter().try_for_each(|f| self.write(&f.name, f.contents.as_bytes()))
    }

    /// Timestamps live only here, so every other output is reproducible.
    fn log(&self, text: &str) -> CliResult<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path("run.log"))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        f.write_all(text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))
    }
}

fn with_preamble(hash: &str, body: &str) -> String {
    csv_preamble(hash) + body
}

pub fn cmd_gen_data(cfg: &GenDataConfig, out: &Outputs) -> CliResult<&'static str> {
    let rotation = |identity: bool, dim: usize| identity.then(|| OrthonormalMatrix::identity(dim));
    match &cfg.dataset {
        &GenSpec::T1 { epsilon, sigma, n_samples, dim, n_test, identity_rotation } => {
            let params = T1Params { epsilon, sigma, n_samples, dim, seed: derive_seed(cfg.seed, "train-data") };
            let train = gen_t1_with_rotation(params, rotation(identity_rotation, dim))?;
            train.save(&out.path("train.bin"))?;
            if n_test > 0 {
                let test = T1Params { n_samples: n_test, seed: derive_seed(cfg.seed, "test-data"), ..params };
                gen_t1_with_rotation(test, train.rotation.clone())?.save(&out.path("test.bin"))?;
            }
        }
        &GenSpec::T2 { rho, epsilon, sigma, k, n_samples, dim, n_test, identity_rotation } => {
            let params = T2Params { rho, epsilon, sigma, k, n_samples, dim, seed: derive_seed(cfg.seed, "train-data") };
            let train = gen_t2_with_rotation(params, rotation(identity_rotation, dim))?;
            train.save(&out.path("train.bin"))?;
            if n_test > 0 {
                let test = T2Params { n_samples: n_test, seed: derive_seed(cfg.seed, "test-data"), ..params };
                gen_t2_with_rotation(test, train.rotation.clone())?.save(&out.path("test.bin"))?;
            }
        }
        GenSpec::Transform { input, ops, output } => {
            let mut ds = input.load()?;
            for &op in ops {
                ds = boundmap_core::datasets::transform_dataset(&ds, op)?;
            }
            match output {
                OutputFormat::Bin => ds.save(&out.path("dataset.bin"))?,
                OutputFormat::Idx => write_idx(&ds, &out.path("images-idx3-ubyte"), &out.path("labels-idx1-ubyte"))?,
            }
        }
    }
    Ok("gen-data")
}

fn initial_model(spec: &ModelSpec, resume: Option<&Path>, ds: &LabeledDataset, seed: u64) -> CliResult<Model> {
    let model = match resume {
        Some(path) => Model::load(path)?,
        None => spec.build(ds.dim(), ds.num_classes(), derive_seed(seed, "init"))?,
    };
    if model.input_dim() != ds.dim() {
        return Err(CliError::Validation(format!("model expects {} inputs, dataset has {}", model.input_dim(), ds.dim())));
    }
    Ok(model)
}

fn load_pair(data: &DataRef, test: Option<&DataRef>) -> CliResult<(LabeledDataset, Option<LabeledDataset>)> {
    Ok((data.load()?, test.map(DataRef::load).transpose()?))
}

fn shuffle_config(train: &TrainConfig, seed: u64) -> CliResult<TrainConfig> {
    train.validate()?;
    Ok(TrainConfig { seed: derive_seed(seed, "shuffle"), ..*train })
}

pub fn cmd_train(cfg: &TrainRunConfig, out: &Outputs) -> CliResult<&'static str> {
    let train_cfg = shuffle_config(&cfg.train, cfg.seed)?;
    let (train, test) = load_pair(&cfg.data, cfg.test.as_ref())?;
    let model = initial_model(&cfg.model, cfg.resume.as_deref(), &train, cfg.seed)?;
    let (model, history) = match cfg.resume {
        Some(_) => finetune(model, &train, test.as_ref(), &train_cfg)?,
        None => train_sgd(model, &train, test.as_ref(), &train_cfg)?,
    };
    model.save(&out.path("model.bmck"))?;
    out.write("history.csv", with_preamble(&config_hash(cfg), &history_csv(&history)).as_bytes())?;
    Ok("train")
}

pub fn cmd_advtrain(cfg: &AdvTrainRunConfig, out: &Outputs) -> CliResult<&'static str> {
    let train_cfg = shuffle_config(&cfg.train, cfg.seed)?;
    cfg.attack.validate()?;
    let (train, test) = load_pair(&cfg.data, cfg.test.as_ref())?;
    cfg.constraint.validate(train.dim())?;
    let model = initial_model(&cfg.model, cfg.resume.as_deref(), &train, cfg.seed)?;
    let sequence = cfg.log_subspaces.as_ref().map(|s| s.build(&train, derive_seed(cfg.seed, "subspaces"))).transpose()?;
    let (model, history, log) = adversarial_train(model, &train, test.as_ref(), &cfg.constraint, &cfg.attack, &train_cfg, sequence.as_ref())?;
    let hash = config_hash(cfg);
    model.save(&out.path("model.bmck"))?;
    out.write("history.csv", with_preamble(&hash, &history_csv(&history)).as_bytes())?;
    let labels = sequence.as_ref().map(|s| s.labels()).unwrap_or_default();
    out.write("perturbations.csv", with_preamble(&hash, &perturbation_log_csv(&log, &labels)).as_bytes())?;
    if sequence.is_some() {
        let (profiles, skipped) = energy_profiles(&log, &labels);
        if skipped > 0 {
            log::warn!("{skipped} zero perturbations left out of the energy profile");
        }
        out.write("energy.csv", energy_csv(&profiles, &hash).as_bytes())?;
    }
    Ok("advtrain")
}

pub fn cmd_measure(cfg: &MeasureRunConfig, out: &Outputs) -> CliResult<&'static str> {
    cfg.attack.validate()?;
    let model = Model::load(&cfg.checkpoint)?;
    let mut ds = cfg.data.load()?;
    if let Some(n) = cfg.n_obs {
        ds = ds.subset(&(0..n.min(ds.len())).collect::<Vec<_>>());
    }
    if ds.len() == 0 {
        return Err(CliError::Validation("observation set is empty".into()));
    }
    let sequence = cfg.subspaces.build(&ds, derive_seed(cfg.seed, "subspaces"))?;
    let campaign = measure_campaign(&model, &ds, &sequence, &cfg.attack)?;
    if !campaign.skipped.is_empty() {
        log::info!("{} misclassified samples skipped", campaign.skipped.len());
    }
    let hash = config_hash(cfg);
    out.write("records.csv", records_csv(&campaign.records, &hash).as_bytes())?;
    out.write("summary.csv", summaries_csv(&summarize(&campaign.records), &hash).as_bytes())?;
    Ok("measure")
}

pub fn cmd_theory(cfg: &TheoryConfig, out: &Outputs) -> CliResult<&'static str> {
    let report = run_theory(cfg)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = csv_preamble(&config_hash(cfg));
    csv.push_str("quantity,value\n");
    let rows = [
        ("law_scale", report.law.scale.to_string()),
        ("law_median", report.law.median.to_string()),
        ("law_variance", report.law.variance.to_string()),
        ("empirical_n", report.empirical.n.to_string()),
        ("empirical_discarded", report.empirical.discarded.to_string()),
        ("empirical_mean", opt(report.empirical.mean)),
        ("empirical_median", opt(report.empirical.median)),
        ("empirical_variance", opt(report.empirical.variance)),
        ("median_relative_error", opt(report.median_relative_error)),
        ("ks_statistic", opt(report.ks.map(|k| k.statistic))),
        ("ks_threshold", cfg.ks_threshold.to_string()),
        ("degenerate", report.degenerate.to_string()),
        ("pass", report.pass.to_string()),
    ];
    for (k, v) in rows {
        csv.push_str(&format!("{k},{v}\n"));
    }
    out.write("theory.csv", csv.as_bytes())?;
    out.json("report.json", &report)?;
    Ok("theory")
}

pub fn cmd_experiment(name: ExperimentName, path: &Path, seed: Option<u64>, out: &Outputs) -> CliResult<&'static str> {
    match name {
        ExperimentName::Table1 => {
            let (report, files) = run_table1(&load::<Table1Config>(path, seed)?)?;
            out.csvs(&files)?;
            out.json("report.json", &report)?;
            Ok("experiment table1")
        }
        ExperimentName::Transition => {
            let (rows, files) = run_transition(&load::<TransitionConfig>(path, seed)?)?;
            out.csvs(&files)?;
            out.json("report.json", &rows)?;
            Ok("experiment transition")
        }
        ExperimentName::Elasticity => {
            let (report, files) = run_elasticity(&load::<ElasticityConfig>(path, seed)?)?;
            out.csvs(&files)?;
            out.json("report.json", &report)?;
            Ok("experiment elasticity")
        }
        ExperimentName::Forgetting => {
            let (report, files) = run_forgetting(&load::<ForgettingConfig>(path, seed)?)?;
            out.csvs(&files)?;
            out.json("report.json", &report)?;
            Ok("experiment forgetting")
        }
        ExperimentName::Support => {
            let (report, files) = run_support(&load::<SupportConfig>(path, seed)?)?;
            out.csvs(&files)?;
            out.json("report.json", &report)?;
            Ok("experiment support")
        }
    }
}
