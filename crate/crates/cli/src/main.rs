use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use degm_cli::commands::{cmd_diagnose, cmd_eval, cmd_export_plots, cmd_train};
use degm_cli::{parse_config, CliResult, Overrides};

#[derive(Parser)]
#[command(name = "degm", version, about = "Lifelong generative learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a replay baseline or an expansion graph over a task stream.
    Train(TrainArgs),
    /// Estimate per-task NLL of a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k_prime: Option<usize>,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
    },
    /// Measure risk, discrepancy and KL-gap traces on saved snapshots.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        eval_size: Option<usize>,
    },
    /// Write plot tables for one or more runs.
    ExportPlots {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    stream: Option<Vec<String>>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent runs, e.g. `--seeds 1,2,3,4,5`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    k_prime: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    replay_ratio: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    eval_k_prime: Option<usize>,
    #[arg(long)]
    diagnostics: bool,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    snapshot_every: Option<usize>,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => {
            let o = Overrides {
                stream: a.stream,
                method: a.method,
                seed: a.seed,
                k_prime: a.k_prime,
                tau: a.tau,
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                replay_ratio: a.replay_ratio,
                output_dir: a.output_dir,
                run_id: a.run_id,
                eval_k_prime: a.eval_k_prime,
                diagnostics: a.diagnostics.then_some(true),
                pool_size: a.pool_size,
                snapshot_every: a.snapshot_every,
            };
            let cfg = parse_config(a.config.as_deref(), &o)?;
            for r in cmd_train(&cfg, &a.seeds)? {
                println!("{} seed {}: final average NLL {:.4} over {} tasks", r.run_id, r.seed, r.final_average_nll, r.tasks);
            }
        }
        Command::Eval {
            run,
            checkpoint,
            k_prime,
            batch_size,
        } => {
            let r = cmd_eval(&run, checkpoint.as_deref(), k_prime, batch_size)?;
            for t in &r.per_task {
                println!("task {}: NLL {:.4} ± {:.4}", t.task, t.nll, t.nll_se);
            }
            match r.selection_accuracy {
                Some(acc) => println!("average NLL {:.4}, selection accuracy {acc:.3}", r.average_nll),
                None => println!("average NLL {:.4}", r.average_nll),
            }
        }
        Command::Diagnose {
            run,
            pool_size,
            eval_size,
        } => {
            let (ledger, report) = cmd_diagnose(&run, pool_size, eval_size)?;
            println!(
                "{} records; discrepancy slope {:.3e}, KL-gap slope {:.3e}",
                ledger.len(),
                report.summary.discrepancy_slope,
                report.summary.kl_gap_slope
            );
        }
        Command::ExportPlots { runs, out } => {
            for p in cmd_export_plots(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
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
