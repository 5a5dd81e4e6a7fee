//! `entropy-dual` command-line front end.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::json;

use commands::{CliError, Command, Outcome, Setup, Status};
use config::RunConfig;
use output::{sha256_hex, OutputDir};

#[derive(Debug, Parser)]
#[command(name = "entropy-dual", version, about = "Entropy-dual solvers and verification suites")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Key-value or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load_config(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| CliError::Config(e.0))?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv).map_err(|e| CliError::Config(e.0))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cap_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ENTROPY_DUAL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("ENTROPY_DUAL_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.to_string()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let fail = |e: CliError| {
        eprintln!("entropy-dual: {e}");
        ExitCode::from(e.exit_code() as u8)
    };
    if let Err(e) = cap_threads() {
        return fail(e);
    }
    let setup = match load_config(&args).and_then(Setup::new) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let root = args.out.clone().unwrap_or_else(|| PathBuf::from("out").join(args.command.name()));
    let mut out = match OutputDir::create(&root) {
        Ok(o) => o,
        Err(e) => return fail(e.into()),
    };
    let outcome = commands::run(args.command, &setup, &mut out);
    let (exit, status, notes, results) = match outcome {
        Ok(Outcome { status, notes, results }) => (status.exit_code(), status.label(), notes, results),
        Err(e) => {
            eprintln!("entropy-dual: {e}");
            let label = match e {
                CliError::Numerical(_) => Status::NonConvergence.label(),
                CliError::Hypothesis(_) => Status::Hypothesis.label(),
                CliError::Config(_) => "config-error",
                CliError::Other(_) => "error",
            };
            (e.exit_code(), label, vec![e.to_string()], serde_json::Value::Null)
        }
    };
    let config = setup.cfg.to_json();
    let config_hash = sha256_hex(config.to_string().as_bytes());
    let versions = json!({ "entropy-dual": entropy_dual::VERSION, "entropy-dual-cli": env!("CARGO_PKG_VERSION") });
    let report = json!({
        "command": args.command.name(),
        "status": status,
        "exit_code": exit,
        "notes": notes,
        "config": config,
        "config_hash": config_hash,
        "versions": versions,
        "results": results,
    });
    if let Err(e) = out.json("report.json", &report) {
        return fail(e.into());
    }
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": args.command.name(),
        "status": status,
        "exit_code": exit,
        "config_hash": config_hash,
        "versions": versions,
        "created_unix": created,
        "files": out.files,
    });
    if let Err(e) = out.json("manifest.json", &manifest) {
        return fail(e.into());
    }
    println!("{} {status} ({})", args.command.name(), root.display());
    ExitCode::from(exit as u8)
}
