//! `ppfm` command-line front end.

mod args;
mod error;
mod manifest;
mod workflows;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::{CliError, CliResult};
use manifest::{Artifact, Manifest, Outputs};

fn execute(command: &Command) -> CliResult<Manifest> {
    let inputs = command
        .inputs()
        .iter()
        .map(|p| Artifact::of_file(p))
        .collect::<CliResult<Vec<_>>>()?;
    log::info!("running {}", command.name());
    let mut out = Outputs::default();
    workflows::run(command, &mut out)?;
    let manifest = Manifest::new(command.clone(), inputs, out.written);
    let path = command.manifest_path();
    Outputs::default().write(&path, &manifest.to_bytes())?;
    Ok(manifest)
}

fn replay(path: &std::path::Path) -> CliResult<()> {
    let recorded = Manifest::load(path)?;
    if recorded.interface != args::INTERFACE_VERSION {
        log::warn!(
            "manifest was written by interface {} (this is {})",
            recorded.interface,
            args::INTERFACE_VERSION
        );
    }
    for input in &recorded.inputs {
        let now = Artifact::of_file(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Invalid(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let fresh = execute(&recorded.command)?;
    let mismatched: Vec<String> = recorded
        .outputs
        .iter()
        .filter(|a| !fresh.outputs.contains(a))
        .map(|a| a.path.display().to_string())
        .collect();
    if !mismatched.is_empty() {
        return Err(CliError::Mismatch(mismatched));
    }
    println!("replay: {} output(s) reproduced", fresh.outputs.len());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Invalid("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(format!("cannot size the thread pool: {e}")))?;
    }
    match (&cli.replay, &cli.command) {
        (Some(_), Some(_)) => Err(CliError::Invalid("--replay takes no subcommand".into())),
        (Some(path), None) => replay(path),
        (None, Some(command)) => execute(command).map(|_| ()),
        (None, None) => Err(CliError::Invalid("no subcommand given".into())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
