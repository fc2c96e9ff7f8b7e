use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use featfuse::experiment::{load_config, run, run_all, Stage};
use featfuse::synth::Split;

/// Multi-encoder feature fusion and single-encoder feature prediction on a
/// synthetic frame-classification task.
#[derive(Parser)]
#[command(name = "featfuse", version)]
struct Cli {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Config overrides such as --stage1.steps=200 or --encoders.1.stride=4.
    #[arg(value_name = "--KEY=VALUE", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen(Overrides),
    /// Train the fusion model and one single-encoder model per encoder.
    TrainFuse(Overrides),
    /// Train the prediction model from the fusion checkpoint.
    TrainPredict(Overrides),
    /// Evaluate every trained graph on a split.
    Eval {
        #[arg(long)]
        split: Option<Split>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Cross-encoder R^2 table from the fusion checkpoint.
    ProbeR2(Overrides),
    /// Parameter counts and real-time factors.
    Bench {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        warmup: Option<usize>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Collect eval and bench results into report.csv.
    Report(Overrides),
    /// Run every stage in order.
    All(Overrides),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<featfuse::Error>().map_or(1, featfuse::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (stage, mut overrides) = match cli.command {
        Command::Gen(o) => (Some(Stage::Gen), o.overrides),
        Command::TrainFuse(o) => (Some(Stage::TrainFuse), o.overrides),
        Command::TrainPredict(o) => (Some(Stage::TrainPredict), o.overrides),
        Command::Eval { split, o } => {
            let mut v = o.overrides;
            v.extend(split.map(|s| format!("--eval.split={}", s.as_str())));
            (Some(Stage::Eval), v)
        }
        Command::ProbeR2(o) => (Some(Stage::ProbeR2), o.overrides),
        Command::Bench { reps, split, warmup, o } => {
            let mut v = o.overrides;
            v.extend(reps.map(|r| format!("--bench.reps={r}")));
            v.extend(split.map(|s| format!("--bench.split={}", s.as_str())));
            v.extend(warmup.map(|w| format!("--bench.warmup={w}")));
            (Some(Stage::Bench), v)
        }
        Command::Report(o) => (Some(Stage::Report), o.overrides),
        Command::All(o) => (None, o.overrides),
    };
    overrides.retain(|s| !s.is_empty());
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    let dir = match stage {
        Some(stage) => run(stage, &cfg, &cli.out).with_context(|| format!("{} failed", stage.name()))?,
        None => run_all(&cfg, &cli.out)?,
    };
    println!("{}", dir.display());
    Ok(())
}
