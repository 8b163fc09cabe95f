use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use latent_ct_cli::commands::{execute, replay, Command};
use latent_ct_cli::config::RunConfig;
use latent_ct_cli::experiments::{Method, Sweep};
use serde_json::json;

/// Sparse-view CT reconstruction with a shallow diffusion prior.
#[derive(Parser, Debug)]
#[command(name = "latent-ct", version)]
struct Cli {
    /// JSON run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set latent.t=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Re-run the command recorded in a manifest and compare output digests.
    #[arg(long, conflicts_with = "config")]
    from_manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the configured phantom and its (subsampled) sinograms.
    Simulate,
    /// Train the noise predictor on random-ellipse phantoms.
    Train,
    /// Reconstruct a sinogram with one method.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        sinogram: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score an image against a reference, or summarize a metric table.
    Evaluate {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["reference", "test"])]
        metrics_csv: Option<PathBuf>,
    },
    /// Run one experiment grid.
    Sweep {
        #[arg(value_enum)]
        sweep: Sweep,
    },
}

fn path_override(key: &str, path: &Option<PathBuf>) -> Option<String> {
    path.as_ref().map(|p| format!("{key}={}", json!(p.display().to_string())))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Some(manifest) = &cli.from_manifest {
        if cli.command.is_some() || !cli.overrides.is_empty() {
            bail!("--from-manifest replays the recorded command and config; only --output-dir may be given");
        }
        let (outcome, mismatches) = replay(manifest, cli.output_dir.clone())?;
        if !mismatches.is_empty() {
            bail!("replay produced different outputs: {}", mismatches.join(", "));
        }
        return Ok(json!({
            "replayed": manifest,
            "manifest": outcome.manifest_path,
            "identical_outputs": outcome.manifest.outputs.len(),
            "summary": outcome.summary,
        }));
    }
    let Some(cmd) = cli.command else {
        bail!("a subcommand is required unless --from-manifest is given");
    };
    let mut overrides = cli.overrides.clone();
    overrides.extend(path_override("output_dir", &cli.output_dir));
    let command = match &cmd {
        Cmd::Simulate => Command::Simulate,
        Cmd::Train => Command::Train,
        Cmd::Reconstruct { method, sinogram, ground_truth, checkpoint } => {
            overrides.extend(path_override("inputs.sinogram", sinogram));
            overrides.extend(path_override("inputs.ground_truth", ground_truth));
            overrides.extend(path_override("inputs.checkpoint", checkpoint));
            Command::Reconstruct { method: *method }
        }
        Cmd::Evaluate { reference, test, metrics_csv } => {
            overrides.extend(path_override("inputs.ground_truth", reference));
            overrides.extend(path_override("inputs.test_image", test));
            overrides.extend(path_override("inputs.metrics_csv", metrics_csv));
            Command::Evaluate
        }
        Cmd::Sweep { sweep } => Command::Sweep { sweep: *sweep },
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let outcome = execute(&command, &cfg)?;
    Ok(json!({ "manifest": outcome.manifest_path, "summary": outcome.summary }))
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use latent_ct::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::InvalidInput(_)) => "invalid_input",
        Some(E::Diverged { .. } | E::TrainingDiverged { .. } | E::LatentDiverged { .. }) => "diverged",
        Some(E::Format(_)) => "format",
        Some(E::Io(_)) => "io",
        Some(E::Json(_) | E::Csv(_)) => "parse",
        None if err.chain().any(|e| e.is::<std::io::Error>()) => "io",
        None => "error",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = json!({ "error": { "kind": "usage", "message": e.kind().to_string(), "detail": e.to_string() } });
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            let msg = json!({ "error": { "kind": error_kind(&err), "message": format!("{err:#}") } });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
