use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polyadapt_cli::commands::{
    checkpoint_root, cmd_adapt_eval, cmd_align, cmd_count, cmd_pretrain, cmd_suite, dry_run,
    format_summary,
};
use polyadapt_cli::config::ExperimentConfig;
use polyadapt_cli::CliResult;
use polyadapt_core::strategies::Dims;

#[derive(Parser)]
#[command(
    name = "polyadapt",
    version,
    about = "Routed adapter inventories on a frozen toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set trainer.lr=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Multi-task pre-training; writes one checkpoint per seed.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Validate and print the parameter budget without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Few-shot adaptation and evaluation on every test task.
    AdaptEval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint root; defaults to `<output_dir>/checkpoints`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trainable-parameter budget per adapted layer and for the whole model.
    Count {
        /// Strategy name, e.g. `poly-s` or `full-ft`.
        #[arg(long)]
        method: String,
        /// Model width.
        #[arg(long)]
        d: usize,
        /// LoRA rank.
        #[arg(long)]
        r: usize,
        /// Inventory size |S|.
        #[arg(long, default_value_t = 1)]
        skills: usize,
        /// Number of training tasks |T|.
        #[arg(long, default_value_t = 1)]
        tasks: usize,
        /// Routing heads h.
        #[arg(long, default_value_t = 1)]
        heads: usize,
        /// Encoder-decoder layers; each adapts 12 projections.
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Adapted projections sharing one routing tensor.
        #[arg(long, default_value_t = 1)]
        period: usize,
    },
    /// Pairwise gradient alignment between training tasks at a checkpoint.
    Align {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint root; defaults to `<output_dir>/checkpoints`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-train, adapt and evaluate each strategy in `suite.methods`.
    Suite {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Pretrain {
            config,
            dry_run: true,
        } => dry_run(&config.load()?),
        Command::Pretrain { config, .. } => {
            let cfg = config.load()?;
            let runs = cmd_pretrain(&cfg)?;
            Ok(runs
                .iter()
                .map(|r| {
                    format!(
                        "seed {} best step {} val perplexity {:.4} -> {}\n",
                        r.seed,
                        r.log.best_step,
                        r.log.best_perplexity.unwrap_or(f64::NAN),
                        r.dir.display()
                    )
                })
                .collect())
        }
        Command::AdaptEval { config, checkpoint } => {
            let cfg = config.load()?;
            let root = checkpoint.unwrap_or_else(|| checkpoint_root(&cfg));
            Ok(format_summary(&cmd_adapt_eval(&cfg, &root)?))
        }
        Command::Count {
            method,
            d,
            r,
            skills,
            tasks,
            heads,
            layers,
            period,
        } => cmd_count(
            &method,
            Dims {
                d,
                r,
                skills,
                tasks,
                heads,
            },
            layers,
            period,
        ),
        Command::Align { config, checkpoint } => {
            let cfg = config.load()?;
            let root = checkpoint.unwrap_or_else(|| checkpoint_root(&cfg));
            let runs = cmd_align(&cfg, &root)?;
            Ok(runs
                .iter()
                .flat_map(|s| s.reports.iter().map(move |r| (s.seed, r)))
                .map(|(seed, r)| match r.mean_offdiag {
                    Some(m) => format!(
                        "seed {seed} step {} mean off-diagonal alignment {m:.6}\n",
                        r.step
                    ),
                    None => format!(
                        "seed {seed} step {} mean off-diagonal alignment undefined\n",
                        r.step
                    ),
                })
                .collect())
        }
        Command::Suite { config } => Ok(format_summary(&cmd_suite(&config.load()?)?)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
