//! Thin command-line front end over the library entry points.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedcl::cli::{
    compare, comparison_table, gradient_suite, gradient_suite_report, parse_config,
    probe_checkpoint, run_experiment, summarize, summary_csv, summary_table, Overrides,
};
use fedcl::protocol::Variant;
use fedcl::Error;

#[derive(Parser)]
#[command(name = "fedcl", about = "Deterministic federated self-supervised pretraining simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file (flat dotted key-value text); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol variant (fedmoco, fedbyol, fcl, fclopt, fclopt-ptnu, fclopt-ptnu-dp).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSVs, checkpoints, and summaries.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    participation: Option<f64>,
    /// Train clients across threads; results are bit-identical either way.
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(ConfigArgs),
    /// Run several variants on identical data and compare bytes/accuracy.
    Compare {
        /// Comma-separated variant list, e.g. fcl,fclopt,fclopt-ptnu-dp.
        #[arg(long, required = true)]
        variants: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize ledger CSVs into per-component totals and ratios.
    Summarize {
        /// Paths to ledger.csv files from prior runs.
        #[arg(required = true)]
        ledgers: Vec<PathBuf>,
        /// Optional path for the summary CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Probe a checkpointed encoder against a random initialization.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<fedcl::cli::ExperimentConfig, Error> {
    let mut cfg = parse_config(args.config.as_deref())?;
    let overrides = Overrides {
        variant: args.variant.as_deref().map(Variant::parse).transpose()?,
        rounds: args.rounds,
        seed: args.seed,
        output_dir: args.out.clone(),
        clients: args.clients,
        local_epochs: args.local_epochs,
        learning_rate: args.lr,
        participation: args.participation,
        parallel: args.parallel.then_some(true),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let artifacts = run_experiment(&cfg)?;
            println!("wrote artifacts to {}", artifacts.output_dir.display());
            println!("total bytes: {}", artifacts.outcome.ledger.total());
            println!(
                "probe accuracy: {:.4} (random init {:.4})",
                artifacts.probe_accuracy, artifacts.probe_accuracy_random_init
            );
            Ok(())
        }
        Command::Compare { variants, config } => {
            let cfg = load_config(&config)?;
            let parsed: Vec<Variant> = variants
                .split(',')
                .map(|s| Variant::parse(s.trim()))
                .collect::<Result<_, _>>()?;
            let rows = compare(&cfg, &parsed)?;
            print!("{}", comparison_table(&rows));
            println!("wrote {}/comparison.csv", cfg.output_dir);
            Ok(())
        }
        Command::Summarize { ledgers, out } => {
            let rows = summarize(&ledgers)?;
            print!("{}", summary_table(&rows));
            if let Some(path) = out {
                std::fs::write(&path, summary_csv(&rows))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::GradCheck { instances, seed } => {
            let lines = gradient_suite(instances, seed)?;
            print!("{}", gradient_suite_report(&lines));
            if lines.iter().all(|l| l.passed()) {
                Ok(())
            } else {
                Err(Error::NonFinite { op: "gradient suite" })
            }
        }
        Command::Probe { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let (accuracy, baseline) = probe_checkpoint(&checkpoint, &cfg)?;
            println!("checkpoint accuracy: {accuracy:.4}");
            println!("random-init accuracy: {baseline:.4}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::InvalidConfig { .. } | Error::Malformed { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
