//! Experiment CLI: `run` a configured method over its seeds, `ablate` the
//! component grid, `gen-corpus` a synthetic dataset, and `report` a run
//! directory as a markdown table.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error. Log
//! verbosity comes from the `RICL_LOG` environment variable (error, warn,
//! info, debug, trace).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ricl::config::parse_config;
use ricl::experiment::{ablate, report_dir, run_experiment_in};
use ricl::stream::{generate_synthetic_corpus, save_corpus};
use ricl::RiclError;

#[derive(Parser)]
#[command(name = "ricl", about = "Continual-learning experiments over noisy label streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method over all seeds and write artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-row TCP/NCL/IPO ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic JSONL corpus plus its synonym table.
    GenCorpus {
        /// Number of classes.
        #[arg(long)]
        classes: usize,
        /// Documents per class.
        #[arg(long = "per-class")]
        per_class: usize,
        /// Base vocabulary size.
        #[arg(long, default_value_t = 400)]
        vocab: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output corpus path (the synonym table lands next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a markdown AP/AF table for a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn execute(cli: Cli) -> ricl::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.run.seeds = vec![s];
            }
            let out_dir = out.unwrap_or_else(|| cfg.run.output_dir.clone());
            let summary = run_experiment_in(&cfg, &out_dir)?;
            println!(
                "{}: AP {:.2} ± {:.2}, AF {:.2} ± {:.2} over {} seed(s) -> {}",
                summary.label,
                summary.ap_mean,
                summary.ap_std,
                summary.af_mean,
                summary.af_std,
                summary.results.len(),
                out_dir.display()
            );
        }
        Command::Ablate { config, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(out) = out {
                cfg.run.output_dir = out;
            }
            let rows = ablate(&cfg)?;
            println!("| TCP | NCL | IPO | AP | AF |");
            println!("|---|---|---|---|---|");
            for row in rows {
                let mark = |on: bool| if on { "x" } else { " " };
                println!(
                    "| {} | {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
                    mark(row.tcp),
                    mark(row.ncl),
                    mark(row.ipo),
                    row.summary.ap_mean,
                    row.summary.ap_std,
                    row.summary.af_mean,
                    row.summary.af_std
                );
            }
        }
        Command::GenCorpus {
            classes,
            per_class,
            vocab,
            seed,
            out,
        } => {
            let (corpus, table) = generate_synthetic_corpus(classes, per_class, vocab, seed)?;
            save_corpus(&corpus, &out)?;
            let table_path = out.with_extension("synonyms.tsv");
            table.save(&table_path)?;
            println!(
                "wrote {} documents over {} classes to {} (synonyms: {})",
                corpus.docs.len(),
                corpus.num_classes(),
                out.display(),
                table_path.display()
            );
        }
        Command::Report { dir } => {
            print!("{}", report_dir(&dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RICL_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
