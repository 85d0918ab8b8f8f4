use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtd_pretrain::config::{group_thousands, token_accounting, TrainPlan};
use rtd_pretrain::corpus::Corpus;
use rtd_pretrain::trainer::{export_final, pretrain, RunOptions, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "rtdp", version, about = "Replaced-token-detection pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator/discriminator pair through every phase of a plan.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// UTF-8 text, one document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write the discriminator-only model with merged embeddings.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, isolation, attention and coverage checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the number of input tokens a plan processes.
    Account {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Pretrain {
            config,
            corpus,
            out,
            resume,
        } => {
            let plan = TrainPlan::load(&config)?;
            let corpus = Corpus::load(&corpus, &plan)?;
            let outcome = pretrain(
                &plan,
                &corpus,
                &out,
                resume.as_deref(),
                RunOptions {
                    stop_after: None,
                    progress: true,
                },
            )?;
            println!(
                "trained {} tokens; checkpoint {}",
                group_thousands(outcome.state.tokens_seen),
                out.join(CHECKPOINT_FILE).display()
            );
            Ok(true)
        }
        Command::Export { ckpt, out } => {
            let c = export_final(&ckpt, &out)?;
            println!("wrote {} tensors to {}", c.tensors.len(), out.display());
            Ok(true)
        }
        Command::Verify { seed } => {
            let reports = rtd_core::verify::standard_suite(seed)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} checks, {} passed, {failed} failed", reports.len(), reports.len() - failed);
            Ok(failed == 0)
        }
        Command::Account { config } => {
            let plan = TrainPlan::load(&config)?;
            for (i, p) in plan.phases.iter().enumerate() {
                println!(
                    "phase {}: {} rows x {} tokens x {} steps = {}",
                    i + 1,
                    group_thousands(p.batch_size as u64),
                    p.max_len,
                    group_thousands(p.steps),
                    group_thousands(p.tokens())
                );
            }
            println!("total: {}", group_thousands(token_accounting(&plan)));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
