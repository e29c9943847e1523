mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kmts::encoder::{EncoderMode, KeyTap};
use kmts::forecaster::IndexKind;
use kmts::Error;

#[derive(Parser, Debug)]
#[command(name = "kmts", version, about = "Retrieval-augmented multivariate time-series forecasting")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic panel with planted motifs.
    Synth(SynthArgs),
    /// Convert between .csv and .kmtsbin.
    Convert { input: PathBuf, output: PathBuf },
    /// Train an encoder and write checkpoint, trace and resolved config.
    Train(TrainArgs),
    /// Encode the training split into a datastore.
    BuildStore(StoreArgs),
    /// Evaluate with or without retrieval.
    Eval(EvalArgs),
    /// Dump the neighbors behind one forecast.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output path; the extension picks the format.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Steps per simulated day.
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    motif_len: Option<usize>,
    #[arg(long)]
    motifs: Option<usize>,
    #[arg(long)]
    motif_count: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Also write a ring adjacency next to the data.
    #[arg(long)]
    ring_graph: bool,
}

/// Where a run lives; `--run` wins over the config's name.
#[derive(Args, Debug, Clone)]
struct RunLocation {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to runs/<name>.
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Hybrid,
    LongOnly,
    ShortOnly,
}

impl From<ModeArg> for EncoderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hybrid => EncoderMode::Hybrid,
            ModeArg::LongOnly => EncoderMode::LongOnly,
            ModeArg::ShortOnly => EncoderMode::ShortOnly,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TapArg {
    Fusion,
    HeadLinear,
    HeadRelu,
    Long,
    Short,
}

impl From<TapArg> for KeyTap {
    fn from(t: TapArg) -> Self {
        match t {
            TapArg::Fusion => KeyTap::FusionOutput,
            TapArg::HeadLinear => KeyTap::HeadHiddenLinear,
            TapArg::HeadRelu => KeyTap::HeadHiddenRelu,
            TapArg::Long => KeyTap::LongFusion,
            TapArg::Short => KeyTap::ShortFusion,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum IndexArg {
    Exact,
    Ivf,
}

impl From<IndexArg> for IndexKind {
    fn from(i: IndexArg) -> Self {
        match i {
            IndexArg::Exact => IndexKind::Exact,
            IndexArg::Ivf => IndexKind::Ivf,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    loc: RunLocation,
    #[arg(long)]
    name: Option<String>,
    /// Dataset path, overriding the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct StoreArgs {
    #[command(flatten)]
    loc: RunLocation,
    /// Keep this fraction of the training windows.
    #[arg(long)]
    fraction: Option<f64>,
    /// Seed of the subsample.
    #[arg(long)]
    seed: Option<u64>,
    /// Which representation becomes the key.
    #[arg(long, value_enum)]
    tap: Option<TapArg>,
    /// Also write an inverted-file sidecar with this many lists.
    #[arg(long)]
    ivf_lists: Option<usize>,
    /// Replace an existing store.
    #[arg(long)]
    force: bool,
    /// Write to this path instead of <run>/store.kmtds.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    loc: RunLocation,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Evaluate the bare encoder.
    #[arg(long)]
    no_store: bool,
    /// Datastore path instead of <run>/store.kmtds.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    index: Option<IndexArg>,
    #[arg(long)]
    n_probe: Option<usize>,
    #[arg(long)]
    exclude_self: bool,
    /// K values to sweep, e.g. `1,5,10,50` or `1..100`.
    #[arg(long)]
    k_grid: Option<String>,
    /// α values to sweep, e.g. `0.05,0.2,0.5` or `0.05..0.5:0.05`.
    #[arg(long)]
    alpha_grid: Option<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    loc: RunLocation,
    #[arg(long)]
    node: usize,
    /// Last history step of the window.
    #[arg(long)]
    end_step: usize,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Neighbor table path instead of <run>/neighbors.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Load { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {}", e);
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Convert { input, output } => commands::convert(&input, &output),
        Command::Train(a) => commands::train(a),
        Command::BuildStore(a) => commands::build_store(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
