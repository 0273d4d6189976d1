mod args;
mod commands;
mod manifest;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::Parser;
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

use args::{Cli, Command, ReplayArgs};
use manifest::Manifest;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(EXIT_CONFIG, "usage", &e.to_string()),
    };

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        return fail(EXIT_RUNTIME, "runtime", &format!("cannot start thread pool: {e}"));
    }

    let result = match &cli.command {
        Command::Replay(r) => replay(&cli, r),
        _ => execute(&cli, &argv),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let config = e.chain().find_map(|c| c.downcast_ref::<robflat::Error>()).is_some_and(robflat::Error::is_config);
            let message = format!("{e:#}");
            if config {
                fail(EXIT_CONFIG, "config", &message)
            } else {
                fail(EXIT_RUNTIME, "runtime", &message)
            }
        }
    }
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    let err = json!({ "error": { "code": code, "kind": kind, "message": message.trim_end() } });
    eprintln!("{err}");
    ExitCode::from(code)
}

/// Runs a command, then records its manifest next to the outputs.
fn execute(cli: &Cli, argv: &[String]) -> Result<Value> {
    let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = commands::dispatch(cli, &out)?;
    let inputs = outcome
        .inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), manifest::sha256_file(p)?)))
        .collect::<Result<_>>()?;
    let m = Manifest {
        tool: "robflat".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        checkpoint_format: robflat::checkpoint::VERSION,
        command: cli.command.name().into(),
        argv: argv.to_vec(),
        cwd: std::env::current_dir()?,
        seed: outcome.seed,
        threads: cli.threads,
        config_hash: outcome.config_hash,
        inputs,
        outputs: manifest::digests(&out, &outcome.outputs)?,
    };
    m.write(&out)?;
    Ok(outcome.summary)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    Ok(if path.is_absolute() { path.to_path_buf() } else { std::env::current_dir()?.join(path) })
}

/// Re-executes the manifest's command line into a fresh directory and compares
/// every recorded output digest.
fn replay(cli: &Cli, r: &ReplayArgs) -> Result<Value> {
    let m = Manifest::read(&r.manifest)?;
    let mut original = Cli::try_parse_from(&m.argv)
        .map_err(|e| robflat::Error::Config(format!("manifest argv does not parse: {e}")))?;
    if matches!(original.command, Command::Replay(_)) {
        return Err(robflat::Error::Config("cannot replay a replay".into()).into());
    }
    let out = match &cli.out_dir {
        Some(d) => absolute(d)?,
        None => absolute(&r.manifest.parent().unwrap_or(Path::new(".")).join("replay"))?,
    };
    let here = std::env::current_dir()?;
    std::env::set_current_dir(&m.cwd).map_err(|e| robflat::Error::Config(format!("cannot enter {}: {e}", m.cwd.display())))?;
    original.out_dir = Some(out.clone());
    let ran = execute(&original, &m.argv);
    std::env::set_current_dir(here)?;
    ran?;

    let mut mismatches = Vec::new();
    for (name, expected) in &m.outputs {
        match manifest::sha256_file(&out.join(name)) {
            Ok(actual) if &actual == expected => {}
            Ok(actual) => mismatches.push(json!({ "output": name, "expected": expected, "actual": actual })),
            Err(_) => mismatches.push(json!({ "output": name, "expected": expected, "actual": null })),
        }
    }
    let summary = json!({
        "manifest": r.manifest.display().to_string(),
        "out_dir": out.display().to_string(),
        "outputs": m.outputs.len(),
        "identical": mismatches.is_empty(),
        "mismatches": mismatches,
    });
    if !mismatches.is_empty() {
        anyhow::bail!("replay outputs differ: {summary}");
    }
    Ok(summary)
}
