//! `inferlab`: cost analysis, roofline sweeps, post-training quantization,
//! kernel benchmarks, instrumented execution and fusion mining.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::output::CliError;

#[derive(Parser)]
#[command(name = "inferlab", version, about = "Inference workload analysis and reduced-precision toolkit")]
struct Cli {
    /// Worker threads for kernels and mining (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Graph file (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Weight container; defaults to `<model stem>.dliw` next to the model when present.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-op FLOPs, traffic and arithmetic intensity.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Storage type assumed for weights: f32, f16, i8 or declared.
        #[arg(long, default_value = "declared")]
        weight_dtype: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roofline time over a grid of on-chip capacities and bandwidths.
    Roofline {
        #[command(flatten)]
        model: ModelArgs,
        /// Accelerator config JSON; defaults to 100 TOP/s and 100 GB/s DRAM.
        #[arg(long)]
        accel: Option<PathBuf>,
        /// On-chip capacities in bytes (comma separated); defaults to 0 and 1 MiB..1 GiB in powers of two.
        #[arg(long, value_delimiter = ',')]
        capacities: Vec<f64>,
        /// On-chip bandwidths in bytes/s (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = [1e12, 1e13])]
        bws: Vec<f64>,
        #[arg(long, default_value = "declared")]
        weight_dtype: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate, profile and emit a quantization plan with selective fallback.
    Quantize {
        #[command(flatten)]
        model: ModelArgs,
        /// Calibration batches in the weight-container format (`batch<i>/<input>` entries).
        #[arg(long)]
        calib: PathBuf,
        /// Relative L2 error above which a layer stays in f32 (`inf` quantizes everything).
        #[arg(long, default_value_t = 1e-2)]
        threshold: f64,
        /// FC layers to quantize with outlier splitting (comma separated).
        #[arg(long, value_delimiter = ',')]
        outlier_layers: Vec<String>,
        /// Use min/max activation ranges instead of L2-optimal ones.
        #[arg(long)]
        minmax: bool,
        #[arg(long)]
        no_narrow: bool,
        /// One scale per weight tensor instead of per output channel.
        #[arg(long)]
        per_tensor: bool,
        /// Also quantize embedding tables row-wise.
        #[arg(long)]
        embeddings: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one GEMM kernel (or all) on seeded random operands.
    Bench {
        #[arg(long, default_value = "all")]
        kernel: String,
        #[arg(long, default_value_t = 256)]
        m: usize,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a model with per-op observers.
    Run {
        #[command(flatten)]
        model: ModelArgs,
        /// Input tensors (weight-container format); float inputs are drawn from `--seed` when omitted.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Quantization plan produced by `quantize`.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Host config used for predicted times.
        #[arg(long)]
        host: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine frequent subgraphs of a corpus and rank fusion opportunities.
    Mine {
        /// Directory of graph files; optional `frequencies.json` maps file stems to execution counts.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2)]
        support: u64,
        #[arg(long, default_value_t = 4)]
        max_size: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        accel: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a built-in example model (and data) to a directory.
    Fixture {
        /// One of: single_fc, compute_fc, recommendation, recommendation_tiny,
        /// interaction, cv, toy_cnn, toy_cnn_sensitive, corpus.
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Analyze { model, weight_dtype, out } => commands::analyze(&model, &weight_dtype, &out),
        Command::Roofline {
            model,
            accel,
            capacities,
            bws,
            weight_dtype,
            out,
        } => commands::roofline(&model, accel.as_deref(), &capacities, &bws, &weight_dtype, &out),
        Command::Quantize {
            model,
            calib,
            threshold,
            outlier_layers,
            minmax,
            no_narrow,
            per_tensor,
            embeddings,
            out,
        } => {
            let opts = inferlab_core::quant::QuantOptions {
                l2_ranges: !minmax,
                narrow: !no_narrow,
                per_channel: !per_tensor,
                outlier_layers,
                embeddings,
                ..Default::default()
            };
            commands::quantize(&model, &calib, threshold, &opts, &out)
        }
        Command::Bench {
            kernel,
            m,
            n,
            k,
            repeats,
            seed,
            out,
        } => commands::bench(&kernel, m, n, k, repeats, seed, &out),
        Command::Run {
            model,
            inputs,
            plan,
            host,
            seed,
            out,
        } => commands::run(&model, inputs.as_deref(), plan.as_deref(), host.as_deref(), seed, &out),
        Command::Mine {
            corpus,
            support,
            max_size,
            k,
            accel,
            out,
        } => commands::mine(&corpus, support, max_size, k, accel.as_deref(), &out),
        Command::Fixture { name, seed, out } => commands::fixture(&name, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
