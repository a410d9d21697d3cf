use clap::{Parser, Subcommand};
use cotjudge_cli::config::{Overrides, PipelineConfig};
use cotjudge_cli::replay::cmd_replay;
use cotjudge_cli::stages::{cmd_fixture, cmd_judge, cmd_label, cmd_manipulate, cmd_score, StageContext};
use cotjudge_cli::CliError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "cotjudge",
    version,
    about = "Measure how chain-of-thought rewrites bias LLM judges of web-agent trajectories"
)]
struct Cli {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory screenshot paths are resolved against.
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for fixtures and bootstrap resampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Treat join failures as errors.
    #[arg(long, global = true)]
    strict: bool,
    /// Answer every provider call from this JSON script instead of the
    /// network.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset.
    Fixture {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        steps_per: usize,
        #[arg(long, default_value_t = 0.5)]
        failure_fraction: f64,
        /// Where to write the dataset (default: the configured dataset path).
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Fill unlabeled gold labels with silver labels from the labeler model.
    Label,
    /// Rewrite the CoT of every gold-failure trajectory per strategy.
    Manipulate,
    /// Judge every original and manipulated trajectory over the mode and
    /// scaling grid.
    Judge,
    /// Join pairs and compute flip-rate and FPR-shift metrics.
    Score,
    /// Re-execute the recorded run offline and verify every artifact digest.
    Replay {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let overrides = Overrides {
        dataset_root: cli.dataset_root.clone(),
        cache_dir: cli.cache_dir.clone(),
        out_dir: cli.out.clone(),
        seed: cli.seed,
    };
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Fixture { n, steps_per, failure_fraction, out_file } => {
            let ctx = StageContext::new(config, cli.strict, cli.mock_script)?;
            cmd_fixture(&ctx, n, steps_per, failure_fraction, out_file)
        }
        Command::Label => {
            let ctx = StageContext::new(config, cli.strict, cli.mock_script)?;
            cmd_label(&ctx)
        }
        Command::Manipulate => {
            let ctx = StageContext::new(config, cli.strict, cli.mock_script)?;
            cmd_manipulate(&ctx)
        }
        Command::Judge => {
            let ctx = StageContext::new(config, cli.strict, cli.mock_script)?;
            cmd_judge(&ctx)
        }
        Command::Score => {
            let ctx = StageContext::new(config, cli.strict, cli.mock_script)?;
            cmd_score(&ctx)
        }
        Command::Replay { manifest } => {
            cmd_replay(&config.out_dir, manifest, cli.mock_script, cli.strict)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
