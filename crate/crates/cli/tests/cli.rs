//! End-to-end tests of the binary: run-directory layout, precedence,
//! determinism, exit codes, the HF_NUM_WORKERS default, and sweeps.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hessfree"));
    cmd.env_remove("HF_NUM_WORKERS");
    cmd
}

fn run_dir_from(output: &Output) -> PathBuf {
    assert!(output.status.success(), "stderr: {}", stderr_of(output));
    PathBuf::from(String::from_utf8_lossy(&output.stdout).trim().to_string())
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// The metrics rows with the timing column dropped: everything a
/// determinism comparison is allowed to look at.
fn without_wall_ms(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|line| {
            let (rest, _wall) = line.rsplit_once(',').expect("csv line");
            rest.to_string()
        })
        .collect()
}

#[test]
fn a_run_writes_exactly_the_manifest_and_the_metrics() {
    let out = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["--dims", "6,5,3", "--batch-size", "64", "--max-iters", "3"])
        .args(["--workers", "2", "--seed", "11"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    let dir = run_dir_from(&output);

    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["manifest.txt", "metrics.csv"]);

    let csv = read(&dir.join("metrics.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "iter,epochs,comm_rounds,train_loss,train_err,test_err,lambda,alpha,inner_iters,curvature,wall_ms"
    );
    assert_eq!(lines.len(), 1 + 3, "one row per outer iteration");
    assert!(!csv.contains('\r'), "rows must use LF endings");

    let mut prev_epochs = 0.0;
    let mut prev_comm = 0u64;
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 11);
        assert_eq!(fields[0].parse::<usize>().unwrap(), i);
        let epochs: f64 = fields[1].parse().unwrap();
        let comm: u64 = fields[2].parse().unwrap();
        assert!(epochs >= prev_epochs && comm >= prev_comm, "tallies decreased");
        prev_epochs = epochs;
        prev_comm = comm;
        // Every remaining column must parse as a number (NaN included).
        for field in &fields[3..] {
            field.parse::<f64>().unwrap_or_else(|_| panic!("bad field {field}"));
        }
    }

    let manifest = read(&dir.join("manifest.txt"));
    assert!(manifest.contains("dims=6,5,3\n"));
    assert!(manifest.contains("workers=2\n"));
    assert!(manifest.contains("seed=11\n"));
}

#[test]
fn flags_override_config_files_end_to_end() {
    let out = tempfile::tempdir().unwrap();
    let config = out.path().join("base.cfg");
    std::fs::write(&config, "dims=6,5,3\nbatch_size=16\nseed=9\nmax_iters=1\n").unwrap();

    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["--batch-size", "32"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    let dir = run_dir_from(&output);

    let manifest = read(&dir.join("manifest.txt"));
    assert!(manifest.contains("batch_size=32\n"), "flag must beat the file");
    assert!(manifest.contains("seed=9\n"), "file must beat the default");
    assert!(manifest.contains("max_iters=1\n"));
}

#[test]
fn identical_manifests_reproduce_identical_metrics() {
    let args = [
        "--dims", "6,5,3", "--batch-size", "64", "--max-iters", "3", "--workers", "1",
        "--seed", "4",
    ];
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let dir_a = run_dir_from(&bin().args(args).arg("--out").arg(out_a.path()).output().unwrap());
    let dir_b = run_dir_from(&bin().args(args).arg("--out").arg(out_b.path()).output().unwrap());

    assert_eq!(dir_a.file_name(), dir_b.file_name(), "content-derived id");
    let a = read(&dir_a.join("metrics.csv"));
    let b = read(&dir_b.join("metrics.csv"));
    assert_eq!(without_wall_ms(&a), without_wall_ms(&b));
    // The manifests agree on everything but the output root itself.
    let experiment_lines = |text: String| -> Vec<String> {
        text.lines()
            .filter(|l| !l.starts_with("out="))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(
        experiment_lines(read(&dir_a.join("manifest.txt"))),
        experiment_lines(read(&dir_b.join("manifest.txt")))
    );
}

#[test]
fn usage_io_and_numeric_failures_use_distinct_exit_codes() {
    let out = tempfile::tempdir().unwrap();

    let usage = bin()
        .args(["--batch-size", "0"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(usage.status.code(), Some(2), "stderr: {}", stderr_of(&usage));

    let unknown_key = out.path().join("bad.cfg");
    std::fs::write(&unknown_key, "batch_sise=64\n").unwrap();
    let usage_file = bin()
        .arg("--config")
        .arg(&unknown_key)
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(usage_file.status.code(), Some(2));
    assert!(stderr_of(&usage_file).contains("batch_sise"));

    let io = bin()
        .args(["--dataset", "mnist", "--mnist-dir", "/nonexistent-mnist"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(io.status.code(), Some(3), "stderr: {}", stderr_of(&io));

    // A learning rate at the float ceiling overflows θ after one update;
    // the run must keep the flushed rows and report a numeric abort.
    let numeric = bin()
        .args(["--method", "sgd", "--lr", "1e308", "--dims", "6,5,3"])
        .args(["--batch-size", "512", "--max-iters", "3", "--seed", "1"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(numeric.status.code(), Some(4), "stderr: {}", stderr_of(&numeric));
    let runs: Vec<_> = std::fs::read_dir(out.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir() && p.join("metrics.csv").exists())
        .collect();
    assert_eq!(runs.len(), 1, "partial run directory must survive");
    let partial = read(&runs[0].join("metrics.csv"));
    assert!(partial.starts_with("iter,"), "header flushed before the abort");
}

#[test]
fn the_environment_fills_workers_when_flags_do_not() {
    let out = tempfile::tempdir().unwrap();
    let args = ["--dims", "6,5,3", "--batch-size", "64", "--max-iters", "1"];

    let from_env = bin()
        .env("HF_NUM_WORKERS", "3")
        .args(args)
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    let manifest = read(&run_dir_from(&from_env).join("manifest.txt"));
    assert!(manifest.contains("workers=3\n"), "{manifest}");

    let flag_wins = bin()
        .env("HF_NUM_WORKERS", "3")
        .args(args)
        .args(["--workers", "2", "--seed", "8"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    let manifest = read(&run_dir_from(&flag_wins).join("manifest.txt"));
    assert!(manifest.contains("workers=2\n"), "{manifest}");

    let garbage = bin()
        .env("HF_NUM_WORKERS", "many")
        .args(args)
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(garbage.status.code(), Some(2));
}

#[test]
fn sweeps_summarise_each_value_and_isolate_failures() {
    let out = tempfile::tempdir().unwrap();
    // 8000 exceeds the synthetic dataset, so that run fails at startup;
    // the sweep must still complete and report the other value.
    let output = bin()
        .args(["--dims", "6,5,3", "--max-iters", "2", "--seed", "3"])
        .args(["--sweep", "batch_size", "--sweep-values", "16,8000"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    let summary_path = PathBuf::from(String::from_utf8_lossy(&output.stdout).trim().to_string());
    assert!(summary_path
        .file_name()
        .unwrap()
        .to_string_lossy()
        .starts_with("sweep-batch_size-"));

    let summary = read(&summary_path);
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "value,iters_to_threshold,final_loss,total_comm_rounds,total_wall_ms"
    );
    assert_eq!(lines.len(), 3);

    let good: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(good[0], "16");
    assert!(good[3].parse::<u64>().unwrap() > 0);

    let failed: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(failed[..4], ["8000", "-1", "NaN", "0"]);

    // Both values produced run directories — the failed one keeps its
    // manifest and whatever rows were flushed (here: just the header).
    let mut row_counts: Vec<usize> = std::fs::read_dir(out.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .map(|p| {
            assert!(p.join("manifest.txt").exists());
            read(&p.join("metrics.csv")).lines().count()
        })
        .collect();
    row_counts.sort_unstable();
    assert_eq!(row_counts, [1, 3], "header-only partial + completed run");
}

#[test]
fn worker_sweeps_share_one_trajectory() {
    let out = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["--dims", "6,5,3", "--batch-size", "64", "--max-iters", "3", "--seed", "5"])
        .args(["--sweep", "workers", "--sweep-values", "1,2,4", "--parallel-runs"])
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));

    let mut metrics: Vec<Vec<String>> = std::fs::read_dir(out.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .map(|p| without_wall_ms(&read(&p.join("metrics.csv"))))
        .collect();
    assert_eq!(metrics.len(), 3, "one run directory per worker count");
    metrics.dedup();
    assert_eq!(metrics.len(), 1, "trajectories must not depend on N");
}
