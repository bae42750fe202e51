use std::path::PathBuf;
use std::process::ExitCode;

use acl_cli::commands::{self, RunOptions};
use acl_cli::config::{load_config, RunConfig};
use acl_cli::CliError;
use acl_core::baselines::BaselineKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "acl", version, about = "Adapter-based continual learning on a frozen CNN backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set round.finetune.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    memory_budget: Option<usize>,
    #[arg(long)]
    adapter_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        let flags = [
            ("memory_budget", self.memory_budget),
            ("round.adapter_training.epochs", self.adapter_epochs),
            ("round.finetune.epochs", self.finetune_epochs),
        ];
        overrides.extend(flags.iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))));
        load_config(&self.config, &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained backbone weights from `acl pretrain`.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

impl TrainArgs {
    fn options(&self, seed: u64) -> Result<RunOptions, CliError> {
        Ok(RunOptions {
            config: self.config.load()?,
            seed,
            out: self.out.clone(),
            backbone: self.backbone.clone(),
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Naive,
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as `train.acld` / `test.acld`.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the backbone on the base classes.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination `.aclt` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Continual run with the configured toggles.
    Run {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        seed: u64,
    },
    Baseline {
        #[arg(long, value_enum)]
        kind: Kind,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every cell of the ablation matrix.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a saved model on an `.acld` file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Mean and standard deviation of MCR across run logs.
    Summary {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
}

fn print_last(reports: &[acl_core::engine::RoundReport]) {
    if let Some(r) = reports.last() {
        println!("round {} mcr {:.4}", r.round, r.mcr);
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => {
            let (train, test) = commands::gen_data(&config.load()?, &out)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::Pretrain { config, seed, out } => {
            let report = commands::pretrain(&config.load()?, seed, &out)?;
            println!("held-out accuracy {:.4}", report.held_out_accuracy);
        }
        Command::Run { train, seed } => print_last(&commands::run(&train.options(seed)?)?),
        Command::Baseline { kind, train, seed } => {
            let kind = match kind {
                Kind::Naive => BaselineKind::Naive,
                Kind::Joint => BaselineKind::Joint,
            };
            print_last(&commands::baseline(&train.options(seed)?, kind)?);
        }
        Command::Ablate { train, seed } => {
            for (label, reports) in commands::ablate(&train.options(seed)?)? {
                if let Some(r) = reports.last() {
                    println!("{label}: last mcr {:.4}", r.mcr);
                }
            }
        }
        Command::Eval { model, data } => {
            let evaluation = commands::eval(&model, &data)?;
            let json = serde_json::to_string_pretty(&evaluation).map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{json}");
        }
        Command::Summary { logs } => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for row in commands::summary(&logs)? {
                w.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            w.flush().map_err(CliError::io("<stdout>"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
