use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2m_cli::commands::{
    cmd_bench_attn, cmd_eval, cmd_gen_synth, cmd_match, cmd_nonlocality, cmd_train, BenchArgs,
    EvalArgs, GenSynthArgs, GlobalArgs, MatchArgs, NonlocalityArgs,
};
use m2m_cli::config::Preset;
use m2m_cli::error::{CliError, Result};
use m2m_core::analysis::DEFAULT_PAIRWISE_CEILING;
use m2m_core::attention::DEFAULT_VANILLA_CEILING;
use m2m_core::evaluation::{AggregationScheme, ThresholdMode};

#[derive(Parser)]
#[command(name = "m2m", version, about = "Match-to-match attention for dense semantic correspondence")]
struct Cli {
    /// JSON file of overrides deep-merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the refiner on the configured provider.
    Train,
    /// Write flows and transferred keypoints for a dataset.
    Match(MatchCmd),
    /// Score predictions with PCK.
    Eval(EvalCmd),
    /// Time additive against quadratic attention over sequence lengths.
    BenchAttn(BenchCmd),
    /// Per-layer nonlocality of a checkpoint, difficulty bins and conv baselines.
    Nonlocality(NonlocalityCmd),
    /// Write a synthetic dataset in the file-provider layout.
    GenSynth(GenSynthCmd),
}

#[derive(Args)]
struct MatchCmd {
    /// Defaults to <out-dir>/checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// File-provider dataset; defaults to the configured holdout.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SchemeArg {
    Pool,
    Mean,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// img, bbox or bbox_kp.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
    t_list: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    d_head: usize,
    #[arg(long, default_value_t = 32)]
    d_in: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_VANILLA_CEILING)]
    vanilla_ceiling: usize,
}

#[derive(Args)]
struct NonlocalityCmd {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    n_bins: usize,
    #[arg(long, default_value_t = DEFAULT_PAIRWISE_CEILING)]
    ceiling: usize,
}

#[derive(Args)]
struct GenSynthCmd {
    #[arg(long)]
    holdout: bool,
    #[arg(long)]
    n_pairs: Option<usize>,
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let global = GlobalArgs {
        config: cli.config,
        seed: cli.seed,
        out_dir: cli.out_dir,
        preset: cli.preset,
    };
    let cfg = global.resolve()?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Match(a) => cmd_match(&cfg, &MatchArgs { checkpoint: a.checkpoint, data_dir: a.data_dir }),
        Command::Eval(a) => {
            let mode = a
                .mode
                .map(|m| m.parse::<ThresholdMode>())
                .transpose()
                .map_err(|e| CliError::config(e.to_string()))?;
            let scheme = a.scheme.map(|s| match s {
                SchemeArg::Pool => AggregationScheme::PerKeypointPool,
                SchemeArg::Mean => AggregationScheme::PerPairMean,
            });
            cmd_eval(
                &cfg,
                &EvalArgs { predictions: a.predictions, annotations: a.annotations, mode, alpha: a.alpha, scheme },
            )
        }
        Command::BenchAttn(a) => cmd_bench_attn(
            &cfg,
            &BenchArgs {
                t_list: a.t_list,
                d_head: a.d_head,
                d_in: a.d_in,
                trials: a.trials,
                vanilla_ceiling: a.vanilla_ceiling,
                seed: cfg.optim.seed,
            },
        ),
        Command::Nonlocality(a) => cmd_nonlocality(
            &cfg,
            &NonlocalityArgs { checkpoint: a.checkpoint, data_dir: a.data_dir, n_bins: a.n_bins, ceiling: a.ceiling },
        ),
        Command::GenSynth(a) => cmd_gen_synth(&cfg, global.seed, &GenSynthArgs { holdout: a.holdout, n_pairs: a.n_pairs }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
