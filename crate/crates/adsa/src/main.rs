//! Command-line driver for the experiment harness.
//!
//! Subcommands: `compare`, `ablate`, `locality`, `memory`. Configuration
//! comes from an optional JSON file (`--config`), with flags layered on
//! top. On failure a machine-readable error JSON is printed to stderr and
//! the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use adsa::cache::{CachePolicy, Variant};
use adsa::harness::{
    run_ablation, run_compare, run_locality, run_memory, ExperimentSpec, HarnessError, NamedPolicy,
};

#[derive(Parser)]
#[command(
    name = "adsa",
    version,
    about = "Cache-policy experiments on a deterministic toy autoregressive decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory for summary.json and the CSV files.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override the config's sample seed.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,
    /// Capture per-head attention weights (required by `locality`).
    #[arg(long, global = true)]
    capture_weights: bool,
    /// Replace the policy grid. The variant is the name's leading tag:
    /// dense, window, window_prefix, or adsa, optionally followed by
    /// "-suffix". Example: --policy adsa-256=32,160,64,256
    #[arg(long = "policy", global = true, value_name = "NAME=n,m,K,C")]
    policies: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every policy in the grid and report context/memory peaks plus
    /// divergence from the dense baseline.
    Compare,
    /// Ablate the three cache regions of the grid's adsa policy, with a
    /// multi-seed statistic for which removal diverges most.
    Ablate,
    /// Histogram attention mass by token distance and raster-column offset.
    Locality,
    /// Sweep batch sizes through the byte-accounting model.
    Memory,
}

/// (kind, message) rendered as the error JSON.
type Failure = (&'static str, String);

fn classify(err: &HarnessError) -> &'static str {
    match err {
        HarnessError::BadSpec(_) | HarnessError::Policy(_) | HarnessError::MissingCapture => {
            "config"
        }
        HarnessError::Io { .. } => "io",
        HarnessError::Model(_) => "run",
    }
}

fn variant_for_name(name: &str) -> Result<Variant, String> {
    // Longest tag first so "window_prefix-..." does not match "window".
    for variant in [
        Variant::WindowPrefix,
        Variant::Window,
        Variant::Dense,
        Variant::Adsa,
    ] {
        let tag = variant.tag();
        let tagged = name == tag
            || (name.starts_with(tag) && name.as_bytes().get(tag.len()) == Some(&b'-'));
        if tagged {
            return Ok(variant);
        }
    }
    Err(format!(
        "policy name {name:?} must be one of dense, window, window_prefix, adsa, \
         optionally followed by \"-suffix\""
    ))
}

fn parse_policy_flag(raw: &str) -> Result<NamedPolicy, String> {
    let (name, numbers) = raw
        .split_once('=')
        .ok_or_else(|| format!("--policy {raw:?}: expected NAME=n,m,K,C"))?;
    let variant = variant_for_name(name)?;
    let fields: Vec<&str> = numbers.split(',').collect();
    if fields.len() != 4 {
        return Err(format!(
            "--policy {raw:?}: expected four comma-separated values n,m,K,C"
        ));
    }
    let mut values = [0usize; 4];
    for (slot, field) in values.iter_mut().zip(&fields) {
        *slot = field
            .trim()
            .parse()
            .map_err(|e| format!("--policy {raw:?}: bad number {field:?}: {e}"))?;
    }
    let [n, m, k, c] = values;
    let policy = CachePolicy {
        variant,
        n_prefix: n,
        m_local: m,
        k_select: k,
        capacity: c,
        shared_selection: false,
    };
    policy
        .validate()
        .map_err(|e| format!("--policy {raw:?}: {e}"))?;
    Ok(NamedPolicy {
        name: name.to_string(),
        policy,
    })
}

fn build_spec(cli: &Cli) -> Result<ExperimentSpec, Failure> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path).map_err(|e| (classify(&e), e.to_string()))?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.sample_seed = seed;
    }
    if cli.capture_weights {
        spec.capture_weights = true;
    }
    if !cli.policies.is_empty() {
        spec.policies = cli
            .policies
            .iter()
            .map(|raw| parse_policy_flag(raw))
            .collect::<Result<_, _>>()
            .map_err(|m| ("config", m))?;
    }
    Ok(spec)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let spec = build_spec(cli)?;
    let fail = |e: HarnessError| (classify(&e), e.to_string());
    match cli.command {
        Command::Compare => {
            let report = run_compare(&spec, &cli.out).map_err(fail)?;
            for row in &report.rows {
                let diverges = row
                    .first_divergence_step
                    .map_or("never".to_string(), |s| format!("step {s}"));
                println!(
                    "{}: peak context {} (reduction {:.1}%), peak cache bytes {} \
                     (reduction {:.1}%), diverges {}",
                    row.name,
                    row.peak_context,
                    row.context_reduction_pct,
                    row.peak_accounted_bytes,
                    row.bytes_reduction_pct,
                    diverges
                );
            }
        }
        Command::Ablate => {
            let report = run_ablation(&spec, &cli.out).map_err(fail)?;
            for row in &report.rows {
                println!(
                    "{}: hamming vs dense {:.3}, first divergence {}",
                    row.name,
                    row.hamming_fraction,
                    row.first_divergence_step
                        .map_or("never".to_string(), |s| format!("step {s}"))
                );
            }
            println!(
                "local_off diverged most on {:.0}% of {} seeds",
                100.0 * report.direction.local_off_largest_fraction,
                report.direction.seeds.len()
            );
        }
        Command::Locality => {
            let report = run_locality(&spec, &cli.out).map_err(fail)?;
            let near: f64 = report.distance_mass.iter().take(report.row_width).sum();
            println!(
                "{} records over {} steps; mass within one row ({} tokens): {:.3}",
                report.record_count, report.step_count, report.row_width, near
            );
        }
        Command::Memory => {
            let report = run_memory(&spec, &cli.out).map_err(fail)?;
            println!("model bytes: {}", report.model_bytes);
            for row in &report.rows {
                println!(
                    "{}: {} bytes/sequence, cache exceeds model at batch {}",
                    row.name,
                    row.per_sequence_bytes,
                    row.crossover_batch
                        .map_or("n/a".to_string(), |b| b.to_string())
                );
            }
        }
    }
    println!("wrote {}", cli.out.join("summary.json").display());
    Ok(())
}

fn emit_error(kind: &str, message: &str) {
    let payload = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{payload}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((kind, message)) => {
            emit_error(kind, &message);
            ExitCode::FAILURE
        }
    }
}
