//! `ksan` command-line driver. Each subcommand is one pipeline stage over
//! an output directory; `reproduce` runs them all.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ksan::experiment::{
    cmd_apply, cmd_attack, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_report, cmd_reproduce,
    ExperimentConfig, OUTPUT_DIR_ENV,
};
use ksan::eval::summary_table;
use ksan::Error;

#[derive(Debug, Parser)]
#[command(name = "ksan", version, about = "Knowledge sanitization experiments on a toy transformer")]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set splits.ratio=50:50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (falls back to the config, then $KSAN_OUTPUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the corpus, vocabulary and per-seed knowledge sets.
    GenData,
    /// Pretrain the base model.
    Pretrain {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Apply one forgetting method for one seed.
    Apply {
        /// neg-grad, neg-task-vector, sanitize, sanitize-no-KR, standard-ft or sanitize@P.
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate the original model and applied variants.
    Eval {
        /// Variants to evaluate; defaults to every configured run.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Seeds to evaluate; defaults to the configured seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run the extraction battery against one variant.
    Attack {
        /// A variant label, or `orig`.
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
    },
    /// Run every stage from scratch and print the summary table.
    Reproduce,
    /// Re-render the CSV and summary table from the report JSON.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&cli.overrides)
}

fn default_labels(cfg: &ExperimentConfig) -> Vec<String> {
    let mut labels: Vec<String> = cfg.methods.iter().map(|m| m.to_string()).collect();
    labels.extend(
        cfg.ablation_retain_percents
            .iter()
            .map(|p| format!("sanitize@{p}")),
    );
    labels
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let out = cfg.resolve_output_dir(cli.out.as_deref());
    let quiet = cli.quiet;
    let mut progress = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::GenData => {
            let files = cmd_gen_data(&cfg, &out)?;
            progress(&format!("wrote {} files under {}", files.len(), out.display()));
        }
        Command::Pretrain { resume } => {
            let em = cmd_pretrain(&cfg, &out, *resume, &mut progress)?;
            println!("probe EM {em:.4}");
        }
        Command::Apply { method, seed } => {
            let log = cmd_apply(&cfg, &out, method, *seed)?;
            println!(
                "{method} seed {seed}: {} steps, {} epochs, status {:?}",
                log.steps.len(),
                log.epochs.len(),
                log.status
            );
        }
        Command::Eval { methods, seeds } => {
            let labels = if methods.is_empty() {
                default_labels(&cfg)
            } else {
                methods.clone()
            };
            let seeds = if seeds.is_empty() {
                cfg.seeds.clone()
            } else {
                seeds.clone()
            };
            let report = cmd_eval(&cfg, &out, &labels, &seeds, &mut progress)?;
            print!("{}", summary_table(&report));
        }
        Command::Attack { method, seed } => {
            let r = cmd_attack(&cfg, &out, method, *seed)?;
            let s = r.summary;
            println!("direct leak {:.4}", s.direct_leak);
            if let Some(a) = s.associated_leak {
                println!("associated leak {a:.4}");
            }
            println!("control leak {:.4}", s.control_leak);
            println!("control EM {:.4}", s.control_em);
        }
        Command::Reproduce => {
            let report = cmd_reproduce(&cfg, &out, &mut progress)?;
            print!("{}", summary_table(&report));
        }
        Command::Report => {
            let hash = cfg.hash()?;
            print!("{}", cmd_report(&out, Some(&hash))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            if matches!(e, Error::MissingArtifact { .. }) && cli.out.is_none() {
                eprintln!("  (output directory can be set with --out or ${OUTPUT_DIR_ENV})");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
