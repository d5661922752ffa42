use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};
use switchkd_cli::ablate::{ablate, worker_threads};
use switchkd_cli::commands;
use switchkd_cli::report::render_table;
use switchkd_cli::{CliError, CliResult, RunConfig};
use switchkd_core::engine::Scheme;
use switchkd_core::loss::StrategyKind;

/// Visual-switch knowledge distillation at desk scale.
///
/// Every command reads one JSON run document (`--config`, defaults when omitted)
/// and writes its artifacts under `--out`. Exit codes: 0 success, 1 usage or
/// config error, 2 runtime failure, 3 verification failure.
#[derive(Debug, Parser)]
#[command(name = "switchkd", version)]
struct Cli {
    /// Run document (JSON). Unknown fields are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the document's `seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the document's `out` directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and persist the synthetic train/val splits.
    GenData,
    /// Train the teacher (PT then SFT) and save its checkpoint.
    TrainTeacher,
    /// Train one student against the saved teacher.
    Distill {
        /// Distillation loss.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<StrategyKind>,
        /// Enable the visual-switch term.
        #[arg(long, overrides_with = "no_switch")]
        switch: bool,
        /// Disable the visual-switch term.
        #[arg(long = "no-switch")]
        no_switch: bool,
        /// Two-stage training scheme.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
    },
    /// Sweep the configured strategies, switch settings and schemes over all seeds.
    Ablate,
    /// Run the self-check suite and print a per-check table.
    Verify,
    /// Evaluate a checkpoint (the teacher when omitted) on the validation split.
    Eval {
        /// Checkpoint manifest or a run directory from `distill`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: switchkd_core::Error| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: switchkd_core::Error| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    worker_threads()?;
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            for path in commands::gen_data(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::TrainTeacher => {
            let t = commands::train_teacher(&cfg)?;
            println!("teacher val accuracy {:.4} on {} samples", t.eval.accuracy, t.eval.n);
            println!("wrote {}", t.checkpoint.display());
        }
        Command::Distill {
            strategy,
            switch,
            no_switch,
            scheme,
        } => {
            let switch = match (switch, no_switch) {
                (true, true) => return Err(CliError::Usage("--switch and --no-switch are exclusive".into())),
                (true, false) => true,
                (false, true) => false,
                (false, false) => cfg.distill.switch_enabled,
            };
            let strategy = strategy.unwrap_or(cfg.distill.strategy.kind);
            let scheme = scheme.unwrap_or(cfg.distill.scheme);
            let run = commands::distill(&cfg, scheme, strategy, switch)?;
            let agreement = run.row.agreement.map_or("-".into(), |a| format!("{a:.4}"));
            println!(
                "{} {} {}: val accuracy {:.4}, teacher agreement {agreement}",
                scheme.label(),
                strategy.label(),
                if switch { "w/ switch" } else { "w/o switch" },
                run.row.val_accuracy
            );
            println!("wrote {}", run.dir.display());
        }
        Command::Ablate => {
            let outcome = ablate(&cfg)?;
            print!("{}", render_table(&outcome.runs));
            println!(
                "wrote {} ({} runs, {} trained now)",
                outcome.csv.display(),
                outcome.runs.len(),
                outcome.trained
            );
        }
        Command::Verify => {
            let report = commands::verify(cfg.seed);
            print!("{report}");
            let failed = report.failed().count();
            if failed > 0 {
                return Err(CliError::Verification { failed });
            }
        }
        Command::Eval { checkpoint } => {
            let outcome = commands::eval(&cfg, checkpoint.as_deref())?;
            let json = serde_json::to_string_pretty(&outcome).map_err(switchkd_core::Error::from)?;
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
