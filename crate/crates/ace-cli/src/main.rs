//! Operator CLI: infrastructure registration, application lifecycle, and the
//! experiment runner. All state lives under a workspace directory; there is
//! no daemon — each command loads the persisted snapshots, replays the
//! deterministic simulation as needed, and persists the results.
//!
//! Exit codes: 0 ok, 2 user error, 3 trend/acceptance failure, 4 internal.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod workspace;

use workspace::{CliError, Workspace};

#[derive(Parser)]
#[command(
    name = "ace",
    about = "Edge-cloud collaboration platform: register infrastructure, deploy applications, run the video-query experiment"
)]
struct Cli {
    /// Workspace directory holding all persisted state.
    #[arg(long, global = true, default_value = ".ace")]
    workspace: PathBuf,
    /// Root seed for deterministic simulation.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Infrastructure registry operations.
    Infra {
        #[command(subcommand)]
        command: InfraCmd,
    },
    /// Application lifecycle.
    App {
        #[command(subcommand)]
        command: AppCmd,
    },
    /// Experiment matrix runner and reporting.
    Exp {
        #[command(subcommand)]
        command: ExpCmd,
    },
}

#[derive(Subcommand)]
enum InfraCmd {
    /// Register the infrastructure declared in an infra.yaml file.
    Register { file: PathBuf },
}

#[derive(Subcommand)]
enum AppCmd {
    /// Parse, validate and orchestrate a topology file; writes plan.json.
    Submit { file: PathBuf },
    /// Deploy a submitted application through the node agents.
    Deploy { name: String },
    /// Update a deployed application from a new topology file.
    Update {
        name: String,
        file: PathBuf,
        #[arg(long, value_parser = ["thorough", "incremental"], default_value = "incremental")]
        mode: String,
    },
    /// Stop a deployed application; the record is kept for audit.
    Remove { name: String },
    /// Print the monitoring snapshot of a deployed application.
    Status { name: String },
}

#[derive(Subcommand)]
enum ExpCmd {
    /// Run the experiment matrix; writes results.csv and a trend summary.
    Run {
        /// Optional exp.yaml overriding the default matrix.
        file: Option<PathBuf>,
        /// Output directory (default: <workspace>/runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump per-run crop traces (large).
        #[arg(long)]
        traces: bool,
    },
    /// Re-check trends over an existing results.csv.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(4)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode, CliError> {
    let ws = Workspace::open(&cli.workspace, cli.seed)?;
    let _lock = ws.lock()?;
    match &cli.command {
        Command::Infra {
            command: InfraCmd::Register { file },
        } => {
            let record = ws.infra_register(file)?;
            println!("{record}");
            Ok(ExitCode::SUCCESS)
        }
        Command::App { command } => match command {
            AppCmd::Submit { file } => {
                let summary = ws.app_submit(file)?;
                println!("{summary}");
                Ok(ExitCode::SUCCESS)
            }
            AppCmd::Deploy { name } => {
                let summary = ws.app_deploy(name)?;
                println!("{summary}");
                Ok(ExitCode::SUCCESS)
            }
            AppCmd::Update { name, file, mode } => {
                let summary = ws.app_update(name, file, mode)?;
                println!("{summary}");
                Ok(ExitCode::SUCCESS)
            }
            AppCmd::Remove { name } => {
                let summary = ws.app_remove(name)?;
                println!("{summary}");
                Ok(ExitCode::SUCCESS)
            }
            AppCmd::Status { name } => {
                let snapshot = ws.app_status(name)?;
                println!("{snapshot}");
                Ok(ExitCode::SUCCESS)
            }
        },
        Command::Exp { command } => match command {
            ExpCmd::Run { file, out, traces } => {
                let out_dir = out.clone().unwrap_or_else(|| ws.dir().join("runs"));
                let ok = ws.exp_run(file.as_deref(), &out_dir, *traces)?;
                Ok(if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(3)
                })
            }
            ExpCmd::Report { out } => {
                let out_dir = out.clone().unwrap_or_else(|| ws.dir().join("runs"));
                let ok = ws.exp_report(&out_dir)?;
                Ok(if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(3)
                })
            }
        },
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))
}
