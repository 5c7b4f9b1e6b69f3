//! Settings resolution: flags, then `VLAB_*` environment variables (both via
//! clap), then the config file, then built-in defaults.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use vlab_core::sync::HeartbeatConfig;

use crate::{CliError, CliResult};

pub const DEFAULT_CONFIG: &str = "vlab.yaml";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    addr: Option<SocketAddr>,
    admin_addr: Option<SocketAddr>,
    journal: Option<PathBuf>,
    fsync: Option<bool>,
    game: Option<PathBuf>,
    accounts: Option<PathBuf>,
    #[serde(default)]
    heartbeat: FileHeartbeat,
    admin_token_ttl_s: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeartbeat {
    interval_s: Option<u64>,
    misses: Option<u32>,
}

/// Values given on the command line or in the environment.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    /// Listener for the player WebSocket (and the admin API unless --admin-addr).
    #[arg(long, env = "VLAB_ADDR")]
    pub addr: Option<SocketAddr>,
    #[arg(long, env = "VLAB_ADMIN_ADDR")]
    pub admin_addr: Option<SocketAddr>,
    #[arg(long, env = "VLAB_JOURNAL")]
    pub journal: Option<PathBuf>,
    #[arg(long, env = "VLAB_FSYNC")]
    pub fsync: Option<bool>,
    /// Game file with the round and stage layout.
    #[arg(long, env = "VLAB_GAME")]
    pub game: Option<PathBuf>,
    /// Admin account file.
    #[arg(long, env = "VLAB_ACCOUNTS")]
    pub accounts: Option<PathBuf>,
    #[arg(long, env = "VLAB_HEARTBEAT_INTERVAL_S")]
    pub heartbeat_interval_s: Option<u64>,
    #[arg(long, env = "VLAB_HEARTBEAT_MISSES")]
    pub heartbeat_misses: Option<u32>,
    #[arg(long, env = "VLAB_ADMIN_TOKEN_TTL_S")]
    pub admin_token_ttl_s: Option<u64>,
}

/// Effective settings. Serialized into the journal at server startup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub config_file: Option<PathBuf>,
    pub addr: SocketAddr,
    pub admin_addr: Option<SocketAddr>,
    pub journal: PathBuf,
    pub fsync: bool,
    pub game: PathBuf,
    pub accounts: PathBuf,
    pub heartbeat_interval_s: u64,
    pub heartbeat_misses: u32,
    pub admin_token_ttl_s: u64,
}

impl Settings {
    /// `config` is an explicit config path; without one `./vlab.yaml` is used
    /// if present.
    pub fn resolve(o: &Overrides, config: Option<&Path>) -> CliResult<Self> {
        let (file, path) = match config {
            Some(p) => (load(p)?, Some(p.to_path_buf())),
            None if Path::new(DEFAULT_CONFIG).is_file() => {
                (load(Path::new(DEFAULT_CONFIG))?, Some(PathBuf::from(DEFAULT_CONFIG)))
            }
            None => (FileConfig::default(), None),
        };
        let base = path
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let s = Settings {
            config_file: path.clone(),
            addr: o.addr.or(file.addr).unwrap_or(SocketAddr::from(([127, 0, 0, 1], 8000))),
            admin_addr: o.admin_addr.or(file.admin_addr),
            journal: o
                .journal
                .clone()
                .or_else(|| file.journal.map(rel))
                .unwrap_or_else(|| base.join("data/journal.jsonl")),
            fsync: o.fsync.or(file.fsync).unwrap_or(true),
            game: o
                .game
                .clone()
                .or_else(|| file.game.map(rel))
                .unwrap_or_else(|| base.join("game.yaml")),
            accounts: o
                .accounts
                .clone()
                .or_else(|| file.accounts.map(rel))
                .unwrap_or_else(|| base.join("admins.yaml")),
            heartbeat_interval_s: o.heartbeat_interval_s.or(file.heartbeat.interval_s).unwrap_or(5),
            heartbeat_misses: o.heartbeat_misses.or(file.heartbeat.misses).unwrap_or(3),
            admin_token_ttl_s: o.admin_token_ttl_s.or(file.admin_token_ttl_s).unwrap_or(8 * 3600),
        };
        if s.heartbeat_interval_s == 0 || s.heartbeat_misses == 0 {
            return Err(CliError::new(
                "config",
                "heartbeat interval and misses must be at least 1",
            ));
        }
        Ok(s)
    }

    pub fn heartbeat(&self) -> HeartbeatConfig {
        HeartbeatConfig {
            interval_ms: self.heartbeat_interval_s * 1000,
            misses_allowed: self.heartbeat_misses,
        }
    }
}

fn load(path: &Path) -> CliResult<FileConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Ok(FileConfig::default());
    }
    serde_yaml::from_str(&text).map_err(|e| {
        let at = e.location().map(|l| format!(":{}", l.line())).unwrap_or_default();
        CliError::new("config", format!("{}{at}: {e}", path.display()))
    })
}

pub fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
