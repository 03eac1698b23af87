use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hetsim_core::config::{parse_config, ConfigError};
use hetsim_core::experiment::{run_experiment, ExperimentError, Mode, Verdict};

const EXIT_IO: u8 = 1;
const EXIT_PARSE: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_PARITY: u8 = 5;
const EXIT_DEADLOCK: u8 = 6;
const EXIT_RUNTIME: u8 = 7;

/// Runs one heterogeneous-parallel training experiment on the simulated fabric.
///
/// Exit status: 0 ok, 1 i/o, 2 usage, 3 config parse, 4 validation or
/// schedule violations, 5 parity failure, 6 deadlock, 7 other runtime error.
#[derive(Debug, Parser)]
#[command(name = "hetsim", version)]
struct Args {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// parity | dispatch | traffic | trace
    #[arg(long, default_value = "parity")]
    mode: Mode,
    /// Overrides `[run] steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `[run] tolerance`.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn error_code(e: &ExperimentError) -> u8 {
    if e.is_deadlock() {
        EXIT_DEADLOCK
    } else if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn run(args: Args) -> Result<u8, (u8, String)> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| {
        let code = match e {
            ConfigError::Parse { .. } => EXIT_PARSE,
            ConfigError::Validation(_) => EXIT_VALIDATION,
        };
        (code, format!("{}: {e}", args.config.display()))
    })?;
    if let Some(s) = args.steps {
        cfg.run.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = args.tolerance {
        cfg.run.tolerance = t;
    }
    let report = run_experiment(&cfg, args.mode).map_err(|e| (error_code(&e), e.to_string()))?;
    match &args.out {
        Some(path) => {
            fs::write(path, &report.text).map_err(|e| (EXIT_IO, format!("cannot write {}: {e}", path.display())))?
        }
        None => print!("{}", report.text),
    }
    Ok(match report.verdict {
        Verdict::Pass => 0,
        Verdict::ParityFailed => EXIT_PARITY,
        Verdict::Violations(_) => EXIT_VALIDATION,
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(code) => ExitCode::from(code),
        Err((code, msg)) => {
            eprintln!("hetsim: {msg}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetsim_core::engine::EngineError;
    use hetsim_core::simnet::SimError;

    #[test]
    fn error_codes_are_distinct() {
        let deadlock = ExperimentError::Engine(EngineError::Sim(SimError::Deadlock {
            waiting: vec![(0, "recv x".into())],
        }));
        assert_eq!(error_code(&deadlock), EXIT_DEADLOCK);
        let invalid = ExperimentError::Config(ConfigError::Validation("bad".into()));
        assert_eq!(error_code(&invalid), EXIT_VALIDATION);
        let codes = [
            EXIT_IO,
            2,
            EXIT_PARSE,
            EXIT_VALIDATION,
            EXIT_PARITY,
            EXIT_DEADLOCK,
            EXIT_RUNTIME,
        ];
        let mut sorted = codes.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
    }
}
