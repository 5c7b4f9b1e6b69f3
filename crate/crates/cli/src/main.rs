//! `vlab`: scaffold, validate, serve, simulate and export experiments.

mod config;
mod export;
mod scaffold;
mod serve;
mod simulate;
mod validate;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vlab", version, about = "Synchronous multi-participant online experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a runnable example experiment in DIR.
    Scaffold {
        dir: PathBuf,
        /// Write into a non-empty directory, replacing scaffold files.
        #[arg(long)]
        force: bool,
    },
    /// Check a protocol file (and optionally a game file and bot script).
    Validate {
        protocol: PathBuf,
        #[arg(long)]
        game: Option<PathBuf>,
        #[arg(long)]
        bots: Option<PathBuf>,
    },
    /// Run the player WebSocket and admin API until interrupted.
    Serve(serve::ServeArgs),
    /// Run every batch in a protocol with scripted bots.
    Simulate(simulate::SimulateArgs),
    /// Write a batch's data tables from a journal file.
    Export(export::ExportArgs),
    /// Manage admin accounts.
    Account {
        #[command(subcommand)]
        command: AccountCommand,
    },
}

#[derive(Subcommand)]
enum AccountCommand {
    /// Add an admin account, or reset its password.
    Add(AccountAdd),
}

#[derive(Args)]
struct AccountAdd {
    #[arg(long)]
    name: String,
    /// Read from VLAB_ADMIN_PASSWORD when not given.
    #[arg(long, env = "VLAB_ADMIN_PASSWORD", hide_env_values = true)]
    password: String,
    /// Account file; defaults to the one named in the config.
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, env = "VLAB_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = vlab_server::auth::DEFAULT_ITERATIONS)]
    iterations: u32,
}

/// A failure reported as one `error[vlab::<code>]: message` line, optionally
/// followed by indented detail lines.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub details: Vec<String>,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace('\n', " ");
        write!(f, "error[vlab::{}]: {one_line}", self.code)?;
        for d in &self.details {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn account_add(a: AccountAdd) -> CliResult {
    let path = match a.file {
        Some(p) => p,
        None => config::Settings::resolve(&config::Overrides::default(), a.config.as_deref())?.accounts,
    };
    if a.password.is_empty() {
        return Err(CliError::new("bad-argument", "password must not be empty"));
    }
    let mut accounts = if path.exists() {
        vlab_server::Accounts::load(&path).map_err(|e| CliError::new("accounts", e.to_string()))?
    } else {
        vlab_server::Accounts::default()
    };
    accounts.upsert(vlab_server::Account::new(&a.name, &a.password, a.iterations));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(&path, accounts.to_yaml()).map_err(|e| CliError::io(&path, e))?;
    println!("admin {:?} saved to {}", a.name, path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Scaffold { dir, force } => scaffold::scaffold(&dir, force),
        Command::Validate { protocol, game, bots } => validate::run(&protocol, game.as_deref(), bots.as_deref()),
        Command::Serve(a) => serve::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Export(a) => export::run(a),
        Command::Account {
            command: AccountCommand::Add(a),
        } => account_add(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::new("usage", first));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("VLAB_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
