//! Executes resolved manifests: single experiments writing
//! `<out>/<run-id>/{manifest.txt,metrics.csv}`, and one-axis sweeps
//! writing a summary CSV next to the per-run directories.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hessfree::data::{load_idx, synthetic_classification, Dataset};
use hessfree::krylov::CurvatureTag;
use hessfree::model::{Activation, NetworkSpec, OutputLoss};
use hessfree::optimizer::{train_with_callback, IterationRecord};
use hessfree::parallel::{shard_dataset, ParallelExecutor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::{fnv1a64, DatasetChoice, RunManifest, SweepAxis};
use crate::{classify, CliError};

pub const METRICS_HEADER: &str =
    "iter,epochs,comm_rounds,train_loss,train_err,test_err,lambda,alpha,inner_iters,curvature,wall_ms";
pub const SUMMARY_HEADER: &str =
    "value,iters_to_threshold,final_loss,total_comm_rounds,total_wall_ms";

/// Synthetic problems are generated at a fixed desk scale; `--dims` sets
/// the input dimension and class count, `--seed` the draw.
const SYNTHETIC_N: usize = 4096;
const SYNTHETIC_NOISE: f64 = 0.1;

const MNIST_IMAGES: &str = "train-images-idx3-ubyte";
const MNIST_LABELS: &str = "train-labels-idx1-ubyte";

pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<IterationRecord>,
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io(hessfree::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_dataset(m: &RunManifest) -> Result<Dataset, CliError> {
    let classes = *m.dims.last().expect("validated dims");
    match m.dataset {
        DatasetChoice::Mnist => {
            let ds = load_idx(
                &m.mnist_dir.join(MNIST_IMAGES),
                &m.mnist_dir.join(MNIST_LABELS),
            )
            .map_err(classify)?;
            if ds.d0() != m.dims[0] || ds.num_classes != classes {
                return Err(CliError::Usage(format!(
                    "dims {:?} do not fit this mnist set ({} inputs, {} classes)",
                    m.dims,
                    ds.d0(),
                    ds.num_classes
                )));
            }
            Ok(ds)
        }
        DatasetChoice::Synthetic => {
            synthetic_classification(m.seed, SYNTHETIC_N, m.dims[0], classes, SYNTHETIC_NOISE)
                .map_err(classify)
        }
    }
}

/// One metrics row. The curvature column is numeric so the CSV stays
/// plot-tool friendly: 0 Newton-type, 1 negative curvature, -1 none
/// (SGD rows and stationary exits).
fn csv_row(r: &IterationRecord) -> String {
    let curvature = match r.curvature_tag {
        Some(CurvatureTag::NewtonType) => 0,
        Some(CurvatureTag::NegativeCurvature) => 1,
        None => -1,
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{:.3}",
        r.k,
        r.epochs_consumed,
        r.comm_rounds,
        r.train_loss,
        r.train_error,
        r.test_error,
        r.lambda,
        r.alpha,
        r.inner_iterations,
        curvature,
        r.wall_ms,
    )
}

/// Runs one experiment into `<out>/<run-id>/`, flushing each metrics row
/// as it is produced so an abort still leaves the rows completed so far.
pub fn run_experiment(manifest: &RunManifest) -> Result<RunOutcome, CliError> {
    manifest.validate()?;
    let ds = load_dataset(manifest)?;
    let spec = NetworkSpec::new(
        manifest.dims.clone(),
        Activation::Sigmoid,
        OutputLoss::SoftmaxCrossEntropy,
    )
    .map_err(classify)?;
    // Sub-seeds derived from the one --seed flag keep the independent
    // random sources uncorrelated but reproducible: the synthetic draw
    // uses seed itself, sharding seed+1, mini-batch sampling seed+2; θ₀
    // comes from cfg.seed inside the optimizer.
    let sharded = shard_dataset(&ds, manifest.workers, manifest.seed.wrapping_add(1))
        .map_err(classify)?;
    let exec = ParallelExecutor::new(spec, sharded).map_err(classify)?;
    let cfg = manifest.train_config();

    let dir = manifest.run_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest.to_key_values()).map_err(|e| io_err(&manifest_path, e))?;

    let metrics_path = dir.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "{METRICS_HEADER}")
        .and_then(|_| writer.flush())
        .map_err(|e| io_err(&metrics_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed.wrapping_add(2));
    let mut write_error: Option<std::io::Error> = None;
    let result = train_with_callback(&cfg, &exec, None, &mut rng, |record| {
        if write_error.is_some() {
            return;
        }
        if let Err(e) = writeln!(writer, "{}", csv_row(record)).and_then(|_| writer.flush()) {
            write_error = Some(e);
        }
    });
    if let Some(e) = write_error {
        return Err(io_err(&metrics_path, e));
    }
    let records = result.map_err(classify)?;
    Ok(RunOutcome { dir, records })
}

/// A sweep point: the canonical label that goes in the summary's `value`
/// column plus the manifest it resolves to.
fn sweep_point(
    base: &RunManifest,
    axis: SweepAxis,
    raw: &str,
) -> Result<(String, RunManifest), CliError> {
    let raw = raw.trim();
    let mut m = base.clone();
    let label = match axis {
        SweepAxis::BatchSize => {
            m.batch_size = raw.parse().map_err(|e| {
                CliError::Usage(format!("invalid batch_size sweep value `{raw}`: {e}"))
            })?;
            m.batch_size.to_string()
        }
        SweepAxis::Workers => {
            m.workers = raw.parse().map_err(|e| {
                CliError::Usage(format!("invalid workers sweep value `{raw}`: {e}"))
            })?;
            m.workers.to_string()
        }
        SweepAxis::Method => {
            m.method = raw
                .parse()
                .map_err(|e| CliError::Usage(format!("invalid method sweep value: {e}")))?;
            m.method.as_str().to_string()
        }
    };
    m.validate()?;
    Ok((label, m))
}

fn summary_row(label: &str, outcome: &Result<RunOutcome, CliError>, threshold: f64) -> String {
    match outcome {
        Err(_) => format!("{label},-1,NaN,0,0.000"),
        Ok(out) => {
            let iters = out
                .records
                .iter()
                .find(|r| r.train_error <= threshold)
                .map(|r| r.k as i64)
                .unwrap_or(-1);
            let (final_loss, comm, wall) = out
                .records
                .last()
                .map(|r| (r.train_loss, r.comm_rounds, r.wall_ms))
                .unwrap_or((f64::NAN, 0, 0.0));
            format!("{label},{iters},{final_loss},{comm},{wall:.3}")
        }
    }
}

/// Runs one experiment per sweep value (shared seed, same base manifest)
/// and writes `sweep-<axis>-<id>.csv` under the output root. A failing
/// run becomes a `-1,NaN` row instead of killing the sweep; invalid sweep
/// values are rejected up front as usage errors.
pub fn run_sweep(
    base: &RunManifest,
    axis: SweepAxis,
    values_raw: &str,
    parallel: bool,
) -> Result<PathBuf, CliError> {
    let points = values_raw
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| sweep_point(base, axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    if points.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }

    let outcomes: Vec<Result<RunOutcome, CliError>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = points
                .iter()
                .map(|(_, m)| scope.spawn(move || run_experiment(m)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep run panicked"))
                .collect()
        })
    } else {
        points.iter().map(|(_, m)| run_experiment(m)).collect()
    };

    let labels: Vec<&str> = points.iter().map(|(label, _)| label.as_str()).collect();
    let id = fnv1a64(
        format!("{}|{}|{}", base.run_id(), axis.as_str(), labels.join(",")).as_bytes(),
    );
    let path = base
        .out
        .join(format!("sweep-{}-{:016x}.csv", axis.as_str(), id));

    let mut text = String::from(SUMMARY_HEADER);
    text.push('\n');
    for ((label, m), outcome) in points.iter().zip(&outcomes) {
        text.push_str(&summary_row(label, outcome, m.threshold));
        text.push('\n');
    }
    fs::create_dir_all(&base.out).map_err(|e| io_err(&base.out, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}
