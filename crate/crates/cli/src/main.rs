//! `sheetlab <experiment> [key=value…]`
//!
//! Exit status: 0 when every threshold passes, 1 on a configuration error, 2 when a run
//! completes with a failed threshold or stops on a numerical error.

mod config;
mod experiments;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use config::{ExperimentConfig, EXPERIMENTS};
use experiments::RunError;

const USAGE: &str = "usage: sheetlab <experiment> [key=value ...]\n\
    output directory: key out=DIR, else $SHEETLAB_OUT, else the current directory";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(experiment) = args.first() else {
        eprintln!("{USAGE}\nexperiments: {}", EXPERIMENTS.join(", "));
        return ExitCode::from(1);
    };
    if experiment == "--help" || experiment == "-h" {
        println!("{USAGE}\nexperiments: {}", EXPERIMENTS.join(", "));
        return ExitCode::SUCCESS;
    }
    let cfg = match ExperimentConfig::parse(experiment, &args[1..]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    match execute(&cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(RunError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(RunError::Numerical(msg)) => {
            eprintln!("numerical error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn execute(cfg: &ExperimentConfig) -> Result<bool, RunError> {
    let threads: usize = cfg.get("threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| RunError::Config(e.to_string()))?;
    }
    let dir = match cfg.raw("out") {
        "" => std::env::var_os("SHEETLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")),
        d => PathBuf::from(d),
    };
    let start = Instant::now();
    let table = experiments::run(cfg)?;
    let path = table.save(cfg, start.elapsed(), &dir).map_err(|e| RunError::Config(format!("cannot write output: {e}")))?;
    let verdict = if table.passed() { "PASS" } else { "FAIL" };
    println!("{} {verdict}: {} rows -> {}", cfg.experiment, table.rows(), path.display());
    Ok(table.passed())
}
