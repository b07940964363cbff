use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memmcl_cli::commands;
use memmcl_cli::error::{EXIT_OK, EXIT_USAGE};
use memmcl_cli::{CliError, Context, PipelineConfig};

#[derive(Debug, Parser)]
#[command(
    name = "memmcl",
    version,
    about = "Multi-expert merging and curriculum pipeline on a synthetic task suite"
)]
struct Args {
    /// TOML config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `pipeline.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `pipeline.workspace`.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the task registry and train/test splits.
    GenTasks,
    /// Train one LoRA expert per task.
    TrainExperts,
    /// Write each expert's misclassified training items.
    ExtractWeak,
    /// Run the two-stage evolutionary merge.
    Evolve,
    /// Rank tasks, build the exemplar block and evaluate base, experts and merged model.
    Curriculum,
    /// Summarize merged-vs-base and merged-vs-expert results.
    Report,
    /// Run every stage in order.
    All,
}

fn run(args: Args) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.pipeline.seed = seed;
    }
    if let Some(ws) = args.workspace {
        config.pipeline.workspace = ws;
    }
    let ctx = Context::new(config);
    match args.command {
        Command::GenTasks => {
            let summary = commands::gen_tasks(&ctx)?;
            println!("wrote {} tasks to {}", summary.len(), ctx.workspace.root().display());
        }
        Command::TrainExperts => {
            for s in commands::train_experts(&ctx)? {
                println!(
                    "{:<16} epochs {:>2}  loss {:.4} -> {:.4}  train acc {:.3} (chance {:.3})",
                    s.task_id, s.epochs, s.first_loss, s.final_loss, s.train_accuracy, s.chance
                );
            }
        }
        Command::ExtractWeak => {
            for s in commands::extract_weak(&ctx)? {
                println!("{:<16} weak {:>4} of {}", s.task_id, s.weak_size, s.train_size);
            }
        }
        Command::Evolve => {
            let result = commands::evolve(&ctx)?;
            for g in &result.groups {
                println!("{:<5} weights {:?}", g.group.as_str(), g.best.weights.values());
            }
            println!(
                "final weights {:?} fitness {:.4}",
                result.final_weights.weights.values(),
                result.final_weights.fitness.unwrap_or(f64::NAN)
            );
        }
        Command::Curriculum => {
            let out = commands::curriculum(&ctx)?;
            for r in &out.rows {
                println!(
                    "{:<16} {:<9} base {:.3}  expert {:.3}  merged {:.3}",
                    r.task_id, r.metric, r.base, r.expert, r.merged
                );
            }
        }
        Command::Report => {
            commands::report(&ctx)?;
            print_summary(&ctx)?;
        }
        Command::All => {
            commands::run_all(&ctx)?;
            print_summary(&ctx)?;
        }
    }
    Ok(())
}

fn print_summary(ctx: &Context) -> Result<(), CliError> {
    let path = ctx.workspace.summary();
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
