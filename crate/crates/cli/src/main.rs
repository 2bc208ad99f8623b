mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qattn::quant::RangeEstimator;
use qattn::training::{Preset, VariantPreset};

/// Train, quantize and inspect desk-scale transformers with clipped-softmax
/// and gated attention.
#[derive(Parser, Debug)]
#[command(name = "qattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an experiment config for a named preset.
    InitConfig(InitConfigArgs),
    /// Train a model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Calibrate and fake-quantize a trained run, then evaluate it.
    Quantize(QuantizeArgs),
    /// Outlier statistics and optional attention-pattern dumps.
    Diagnose(DiagnoseArgs),
    /// Quantize a trained run at several bit-widths.
    Sweep(SweepArgs),
    /// Merge several runs into one comparison table.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct InitConfigArgs {
    #[arg(long, default_value = "toy")]
    preset: Preset,
    #[arg(long, value_enum, default_value = "vanilla")]
    variant: VariantArg,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Where to write the JSON config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum VariantArg {
    Vanilla,
    Clipped,
    Gated,
}

impl From<VariantArg> for VariantPreset {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vanilla => VariantPreset::Vanilla,
            VariantArg::Clipped => VariantPreset::Clipped,
            VariantArg::Gated => VariantPreset::Gated,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Run seed; defaults to the first seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    /// Run directory produced by `train`.
    run: PathBuf,
    /// Weight bit-width, or `fp` to keep weights in floating point.
    #[arg(long, default_value = "8")]
    w_bits: Bits,
    /// Activation bit-width, or `fp`.
    #[arg(long, default_value = "8")]
    a_bits: Bits,
    #[arg(long, default_value = "minmax")]
    weight_est: RangeEstimator,
    #[arg(long, default_value = "running_minmax:0.9:16")]
    act_est: RangeEstimator,
    #[arg(long, default_value_t = 16)]
    calib_batches: usize,
    /// Repeat calibration with this many seeds and report mean±std.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Worker threads for the repetitions.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report path; defaults to `quantize.json` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    run: PathBuf,
    /// `head,layer`, both 1-based.
    #[arg(long)]
    dump_attention: Option<String>,
    /// Number of held-out batches; defaults to the training config's.
    #[arg(long)]
    eval_batches: Option<usize>,
    /// Output directory; defaults to `diagnostics/` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    run: PathBuf,
    /// `W,A[,weight_est[,act_est]]`; repeatable. Defaults to W8A8, W6A8,
    /// W4A8 with MSE weights, and W6A6.
    #[arg(long = "config")]
    configs: Vec<String>,
    #[arg(long, default_value_t = 16)]
    calib_batches: usize,
    /// CSV path; defaults to `sweep.csv` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Run directories, each with a training summary and a quantize report.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Directory for `report.csv` and `report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

/// A bit-width, or `fp` for no quantization.
#[derive(Clone, Copy, Debug)]
struct Bits(Option<u32>);

impl std::str::FromStr for Bits {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "fp" {
            return Ok(Bits(None));
        }
        s.parse::<u32>().map(|b| Bits(Some(b))).map_err(|e| format!("{s:?}: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitConfig(a) => commands::init_config(a),
        Command::Train(a) => commands::train(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
