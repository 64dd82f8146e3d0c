use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlfuse_cli::commands::{self, parse_arm, parse_task, parse_trainable, Session};
use vlfuse_cli::config::{self, DEFAULT_OUT, OUT_ENV};
use vlfuse_cli::error::CliResult;

#[derive(Parser)]
#[command(name = "vlfuse", version, about = "Multi-encoder fusion experiments on synthetic scenes")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set recipe.fusion.dropout_p=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each config writes to `<out>/<config hash>/`.
    #[arg(long, global = true, env = OUT_ENV, default_value = DEFAULT_OUT)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the evaluation scenes.
    Gen,
    /// Pretrain the fusion module on captioning with the LM frozen.
    Pretrain {
        #[arg(long, default_value = "meq")]
        arm: String,
    },
    /// Fine-tune a pretrained model.
    Finetune {
        #[arg(long, default_value = "meq")]
        arm: String,
        #[arg(long, default_value = "qa")]
        task: String,
        /// fusion-only, fusion-lm, lora or lora:<rank>; recipe default when omitted.
        #[arg(long)]
        trainable: Option<String>,
        /// Start from this pretrained checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned model, with attention attribution.
    Eval {
        #[arg(long, default_value = "meq")]
        arm: String,
        #[arg(long, default_value = "qa")]
        task: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Encoder-removal sweep and the ablation grid.
    Ablate {
        #[arg(long, default_value = "qa")]
        task: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fused model against single-encoder specialists and the ensemble.
    CompareEnsemble,
    /// Finite-difference gradient audit of every differentiable module.
    Gradcheck,
    /// Every stage in order.
    RunAll,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seeds=[{seed}]"));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    if let Command::ShowConfig = cli.command {
        println!("# config hash {}", cfg.hash());
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut s = Session::open(cfg, &cli.out)?;
    match &cli.command {
        Command::Gen => commands::gen(&mut s).map(drop),
        Command::Pretrain { arm } => commands::pretrain(&mut s, &parse_arm(arm)?).map(drop),
        Command::Finetune {
            arm,
            task,
            trainable,
            checkpoint,
        } => {
            let trainable = trainable.as_deref().map(parse_trainable).transpose()?;
            commands::finetune(&mut s, &parse_arm(arm)?, parse_task(task)?, trainable, checkpoint.as_deref())
                .map(drop)
        }
        Command::Eval { arm, task, checkpoint } => {
            commands::eval(&mut s, &parse_arm(arm)?, parse_task(task)?, checkpoint.as_deref()).map(drop)
        }
        Command::Ablate { task, checkpoint } => {
            commands::ablate(&mut s, parse_task(task)?, checkpoint.as_deref()).map(drop)
        }
        Command::CompareEnsemble => commands::compare_ensemble(&mut s).map(drop),
        Command::Gradcheck => commands::gradcheck(&mut s).map(drop),
        Command::RunAll => commands::run_all(&mut s).map(drop),
        Command::ShowConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
