//! `zsad`: train prompts, export score maps, evaluate them and report
//! class-name filtering decisions.
//!
//! Settings resolve in three layers, later ones winning: built-in
//! defaults, the JSON config file (`--config`, or the path in
//! `ZSAD_CONFIG`), then command-line flags. Every command writes the
//! resolved settings as `<command>.config.json` in its output directory;
//! passing that file back with `--config` repeats the run.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zsad_core::cnf::CnfMode;
use zsad_core::config::CONFIG_ENV;
use zsad_core::metrics::PixelPooling;

#[derive(Debug, Parser)]
#[command(name = "zsad", version, about = "Zero-shot anomaly detection with learned prompts")]
struct Cli {
    /// JSON run configuration. Flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for per-image inference and per-class metrics.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    workers: u16,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn prompts on an annotated dataset and write `model.ckpt`.
    Train(TrainArgs),
    /// Score every test image with a trained checkpoint.
    Infer(InferArgs),
    /// Compute the metric report from exported score maps.
    Eval(EvalArgs),
    /// Report per-image class-name filtering decisions.
    Cnf(CnfArgs),
    /// Write a small synthetic dataset with planted defects.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or manifest JSON; its test split is used.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Keep class names as given (after digit stripping).
    #[arg(long)]
    no_cnf: bool,
    /// Placeholder the class name is compared against.
    #[arg(long)]
    generic_term: Option<String>,
    #[arg(long, value_enum)]
    cnf_mode: Option<CnfModeArg>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory or manifest JSON.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[command(flatten)]
    filter: FilterArgs,
    /// Also write raw f32 maps next to the PNGs.
    #[arg(long)]
    raw: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory written by `infer`; defaults to the output directory.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    fpr_limit: Option<f64>,
    #[arg(long)]
    num_thresholds: Option<usize>,
}

#[derive(Debug, Args)]
struct CnfArgs {
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory to create the dataset in.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "widget,pcb2")]
    classes: Vec<String>,
    #[arg(long, default_value_t = 3)]
    good: usize,
    #[arg(long, default_value_t = 3)]
    defects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum CnfModeArg {
    PerImage,
    PerClassMajority,
}

impl From<CnfModeArg> for CnfMode {
    fn from(m: CnfModeArg) -> Self {
        match m {
            CnfModeArg::PerImage => CnfMode::PerImage,
            CnfModeArg::PerClassMajority => CnfMode::PerClassMajority,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum PoolingArg {
    PerClass,
    Global,
}

impl From<PoolingArg> for PixelPooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::PerClass => PixelPooling::PerClass,
            PoolingArg::Global => PixelPooling::Global,
        }
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
