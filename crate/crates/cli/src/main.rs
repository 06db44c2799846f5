use std::path::PathBuf;

use clap::Parser;
use hessfree_cli::manifest::{parse_config, Flags};
use hessfree_cli::runner::{run_experiment, run_sweep};
use hessfree_cli::CliError;

fn drive(flags: &Flags) -> Result<PathBuf, CliError> {
    let manifest = parse_config(flags)?;
    match (flags.sweep, flags.sweep_values.as_deref()) {
        (Some(axis), Some(values)) => run_sweep(&manifest, axis, values, flags.parallel_runs),
        // clap's `requires` rules make the axis and values inseparable.
        _ => run_experiment(&manifest).map(|outcome| outcome.dir),
    }
}

fn main() {
    let flags = Flags::parse();
    match drive(&flags) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
