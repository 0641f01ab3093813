use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use moe_compress::basis::{Activation, TrainConfig};
use moe_compress::io::{load_compressed, load_model, save_compressed, save_model, write_atomic};
use moe_compress::model::{generate_synthetic, SyntheticSpec};
use moe_compress::pipeline::{
    compress_model, evaluate, generate_tokens, run_calibration, AllocationMode, PipelineConfig,
    TokenPreset, THREADS_ENV,
};
use moe_compress::routing::TraceFile;
use moe_compress::{Error, Result};

/// Compress the expert weights of a Mixture-of-Experts model.
#[derive(Parser, Debug)]
#[command(name = "moe-compress", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic model from a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count expert activations on seeded calibration tokens.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "gaussian")]
        preset: TokenPreset,
    },
    /// Compress up and gate projections under a parameter ratio.
    Compress(CompressArgs),
    /// Measure reconstruction and forward-pass error.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        report: PathBuf,
        /// Held-out token seed; keep it distinct from the calibration seed.
        #[arg(long, default_value_t = 1_000_003)]
        seed: u64,
        #[arg(long, default_value = "gaussian")]
        preset: TokenPreset,
        /// Renormalize the selected gate weights to sum to one.
        #[arg(long)]
        renorm_gates: bool,
    },
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 0.7)]
    xi: f64,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.03)]
    residual_frac: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "adaptive")]
    allocation: AllocationMode,
    #[arg(long, default_value = "silu")]
    activation: Activation,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    /// Seed of the residual projections.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn echo<T: Serialize>(command: &str, config: &T) {
    let threads = std::env::var(THREADS_ENV).unwrap_or_else(|_| "0".into());
    println!("{}", json!({ "command": command, "config": config, "threads": threads }));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::json(&spec, e))?;
            echo("gen", &json!({ "spec": spec, "out": out }));
            let model = generate_synthetic(&spec)?;
            let manifest = save_model(&model, &out)?;
            println!("{}", json!({ "written": out, "tensors": manifest.tensors.len() }));
        }
        Command::Calibrate {
            model,
            tokens,
            seed,
            out,
            preset,
        } => {
            echo(
                "calibrate",
                &json!({ "model": model, "tokens": tokens, "seed": seed, "out": out, "preset": preset }),
            );
            let m = load_model(&model)?;
            let trace = run_calibration(&m, &generate_tokens(m.d, tokens, seed, preset))?;
            trace.save(&out)?;
            let totals: Vec<u64> = trace.layers.iter().map(|l| l.total()).collect();
            println!("{}", json!({ "written": out, "counts_per_layer": totals }));
        }
        Command::Compress(args) => {
            let config = PipelineConfig {
                ratio: args.ratio,
                xi: args.xi,
                k: args.k,
                residual_fraction: args.residual_frac,
                allocation: args.allocation,
                train: TrainConfig {
                    steps: args.steps,
                    learning_rate: args.lr,
                    activation: args.activation,
                    ..TrainConfig::default()
                },
                seed: args.seed,
            };
            echo(
                "compress",
                &json!({ "model": args.model, "trace": args.trace, "out": args.out, "pipeline": config }),
            );
            let m = load_model(&args.model)?;
            let trace = TraceFile::load(&args.trace)?;
            let compressed = compress_model(&m, &trace, &config)?;
            let manifest = save_compressed(&compressed, &args.out)?;
            println!(
                "{}",
                json!({
                    "written": args.out,
                    "achieved_ratio": manifest.parameters.achieved_ratio,
                    "compressed_params": manifest.parameters.compressed,
                    "original_params": manifest.parameters.original,
                })
            );
        }
        Command::Eval {
            model,
            compressed,
            tokens,
            report,
            seed,
            preset,
            renorm_gates,
        } => {
            echo(
                "eval",
                &json!({
                    "model": model, "compressed": compressed, "tokens": tokens, "report": report,
                    "seed": seed, "preset": preset, "renorm_gates": renorm_gates,
                }),
            );
            let m = load_model(&model)?;
            let c = load_compressed(&compressed)?;
            let r = evaluate(&m, &c, &generate_tokens(m.d, tokens, seed, preset), renorm_gates)?;
            write_report(&report, &r)?;
            println!(
                "{}",
                json!({
                    "written": report,
                    "weighted_error": r.weighted_error,
                    "forward_error": r.forward_error_text,
                    "achieved_ratio": r.parameters.achieved_ratio,
                })
            );
        }
    }
    Ok(())
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.code(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
