//! Flag and config-file resolution into a fully-resolved run manifest.
//!
//! Precedence is flags over config file over environment (`HF_NUM_WORKERS`
//! for `--workers`) over built-in defaults. The manifest serialises as the
//! same flat `key=value` text the config file uses, so the copy written
//! next to a run's metrics can be fed straight back through `--config` to
//! reproduce it.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Parser;
use hessfree::optimizer::{Method, TrainConfig};

use crate::CliError;

/// Which dataset a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    Mnist,
    Synthetic,
}

impl DatasetChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetChoice::Mnist => "mnist",
            DatasetChoice::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DatasetChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(DatasetChoice::Mnist),
            "synthetic" => Ok(DatasetChoice::Synthetic),
            other => Err(format!(
                "unknown dataset `{other}` (expected mnist or synthetic)"
            )),
        }
    }
}

/// Which manifest field a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BatchSize,
    Workers,
    Method,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Workers => "workers",
            SweepAxis::Method => "method",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch_size" | "batch-size" => Ok(SweepAxis::BatchSize),
            "workers" => Ok(SweepAxis::Workers),
            "method" => Ok(SweepAxis::Method),
            other => Err(format!(
                "unknown sweep axis `{other}` (expected batch_size, workers, or method)"
            )),
        }
    }
}

/// Raw command line. Every experiment field is optional here; defaults are
/// applied during [`parse_config`] so the config file and environment can
/// fill gaps first.
#[derive(Parser, Debug)]
#[command(
    name = "hessfree",
    about = "Train fully-connected networks with matrix-free second-order methods",
    disable_help_subcommand = true
)]
pub struct Flags {
    /// Training method: sgd, hf_cg, hf_bicgstab, gn_cg, or hybrid.
    #[arg(long)]
    pub method: Option<Method>,

    /// Dataset: mnist or synthetic.
    #[arg(long)]
    pub dataset: Option<DatasetChoice>,

    /// Directory holding train-images-idx3-ubyte / train-labels-idx1-ubyte.
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,

    /// Comma-separated layer sizes, input first, e.g. 784,400,10.
    #[arg(long)]
    pub dims: Option<String>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Worker count for the data-parallel executor (default: HF_NUM_WORKERS
    /// from the environment, else 1).
    #[arg(long)]
    pub workers: Option<usize>,

    /// Outer iterations (epochs for sgd).
    #[arg(long)]
    pub max_iters: Option<usize>,

    /// Initial Levenberg-Marquardt damping.
    #[arg(long)]
    pub lambda0: Option<f64>,

    /// Warm-start decay applied to the previous direction.
    #[arg(long)]
    pub eta: Option<f64>,

    /// Inner-solver iteration cap.
    #[arg(long)]
    pub cg_iters: Option<usize>,

    /// SGD learning rate.
    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Training-error threshold used for iterations-to-threshold summaries.
    #[arg(long)]
    pub threshold: Option<f64>,

    /// Root directory for run outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Flat key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Sweep one axis (batch_size, workers, or method) instead of running
    /// a single experiment.
    #[arg(long, requires = "sweep_values", value_name = "AXIS")]
    pub sweep: Option<SweepAxis>,

    /// Comma-separated values for the sweep axis.
    #[arg(long, requires = "sweep", value_name = "LIST")]
    pub sweep_values: Option<String>,

    /// Run sweep points on separate threads (each run stays deterministic).
    #[arg(long, requires = "sweep")]
    pub parallel_runs: bool,
}

/// A fully-resolved experiment description: nothing left implicit, every
/// field serialised alongside the results.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub method: Method,
    pub dataset: DatasetChoice,
    pub mnist_dir: PathBuf,
    pub dims: Vec<usize>,
    pub batch_size: usize,
    pub workers: usize,
    pub max_iters: usize,
    pub lambda0: f64,
    pub eta: f64,
    pub cg_iters: usize,
    pub lr: f64,
    pub seed: u64,
    pub threshold: f64,
    pub out: PathBuf,
}

const CONFIG_KEYS: [&str; 14] = [
    "method",
    "dataset",
    "mnist_dir",
    "dims",
    "batch_size",
    "workers",
    "max_iters",
    "lambda0",
    "eta",
    "cg_iters",
    "lr",
    "seed",
    "threshold",
    "out",
];

fn usage(msg: impl fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn parse_key<T>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>, CliError>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|e| usage(format!("invalid value for `{key}`: {e}"))),
    }
}

/// Parses the flat key=value config format: one pair per line, `#` starts
/// a comment, blank lines ignored, unknown keys rejected.
pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        CliError::Io(hessfree::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            usage(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(usage(format!(
                "{}:{}: unknown key `{key}`",
                path.display(),
                lineno + 1
            )));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(usage(format!(
                "{}:{}: duplicate key `{key}`",
                path.display(),
                lineno + 1
            )));
        }
    }
    Ok(map)
}

pub fn parse_dims(raw: &str) -> Result<Vec<usize>, CliError> {
    let dims: Vec<usize> = raw
        .split(',')
        .map(|part| part.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("invalid dims `{raw}`: {e}")))?;
    if dims.len() < 2 {
        return Err(usage(format!(
            "dims needs at least input and output sizes, got `{raw}`"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(usage(format!("dims must all be positive, got `{raw}`")));
    }
    Ok(dims)
}

fn workers_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("HF_NUM_WORKERS") {
        Err(_) => Ok(None),
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|e| usage(format!("invalid HF_NUM_WORKERS `{raw}`: {e}"))),
    }
}

/// Resolves flags + optional config file + environment into a manifest and
/// validates it as far as the dataset-independent invariants allow.
pub fn parse_config(flags: &Flags) -> Result<RunManifest, CliError> {
    let file = match &flags.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };

    let dims_raw = flags
        .dims
        .clone()
        .or_else(|| file.get("dims").cloned())
        .unwrap_or_else(|| "784,100,10".to_string());

    let manifest = RunManifest {
        method: flags
            .method
            .or(parse_key(&file, "method")?)
            .unwrap_or(Method::HfBicgstab),
        dataset: flags
            .dataset
            .or(parse_key(&file, "dataset")?)
            .unwrap_or(DatasetChoice::Synthetic),
        mnist_dir: flags
            .mnist_dir
            .clone()
            .or(parse_key(&file, "mnist_dir")?)
            .unwrap_or_else(|| PathBuf::from("data/mnist")),
        dims: parse_dims(&dims_raw)?,
        batch_size: flags
            .batch_size
            .or(parse_key(&file, "batch_size")?)
            .unwrap_or(256),
        workers: match flags.workers.or(parse_key(&file, "workers")?) {
            Some(w) => w,
            None => workers_from_env()?.unwrap_or(1),
        },
        max_iters: flags
            .max_iters
            .or(parse_key(&file, "max_iters")?)
            .unwrap_or(100),
        lambda0: flags
            .lambda0
            .or(parse_key(&file, "lambda0")?)
            .unwrap_or(1e-2),
        eta: flags.eta.or(parse_key(&file, "eta")?).unwrap_or(0.7),
        cg_iters: flags
            .cg_iters
            .or(parse_key(&file, "cg_iters")?)
            .unwrap_or(5),
        lr: flags.lr.or(parse_key(&file, "lr")?).unwrap_or(0.1),
        seed: flags.seed.or(parse_key(&file, "seed")?).unwrap_or(0),
        threshold: flags
            .threshold
            .or(parse_key(&file, "threshold")?)
            .unwrap_or(0.05),
        out: flags
            .out
            .clone()
            .or(parse_key(&file, "out")?)
            .unwrap_or_else(|| PathBuf::from("runs")),
    };
    manifest.validate()?;
    Ok(manifest)
}

impl RunManifest {
    /// The training configuration this manifest resolves to. Fields the
    /// CLI does not expose keep the library defaults.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.method, self.batch_size);
        cfg.lambda0 = self.lambda0;
        cfg.warm_start_decay = self.eta;
        cfg.max_cg_iter = self.cg_iters;
        cfg.sgd_learning_rate = self.lr;
        cfg.max_outer_iter = self.max_iters;
        cfg.seed = self.seed;
        cfg
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.workers == 0 {
            return Err(usage("workers must be positive"));
        }
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(usage(format!(
                "threshold must be a finite nonnegative number, got {}",
                self.threshold
            )));
        }
        self.train_config().validate().map_err(usage)
    }

    /// The experiment identity lines: everything that affects the numbers,
    /// i.e. all fields except the output root.
    fn identity_lines(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        format!(
            "method={}\ndataset={}\nmnist_dir={}\ndims={}\nbatch_size={}\nworkers={}\n\
             max_iters={}\nlambda0={}\neta={}\ncg_iters={}\nlr={}\nseed={}\nthreshold={}\n",
            self.method.as_str(),
            self.dataset.as_str(),
            self.mnist_dir.display(),
            dims.join(","),
            self.batch_size,
            self.workers,
            self.max_iters,
            self.lambda0,
            self.eta,
            self.cg_iters,
            self.lr,
            self.seed,
            self.threshold,
        )
    }

    /// Full key=value serialisation, accepted back through `--config`.
    pub fn to_key_values(&self) -> String {
        format!("{}out={}\n", self.identity_lines(), self.out.display())
    }

    /// Content-derived run id: FNV-1a over the identity lines, in hex.
    /// Moving the output root does not change a run's identity.
    pub fn run_id(&self) -> String {
        format!("{:016x}", fnv1a64(self.identity_lines().as_bytes()))
    }

    /// Directory this run writes into.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.run_id())
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
