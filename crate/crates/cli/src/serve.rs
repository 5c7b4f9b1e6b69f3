use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;

use vlab_core::{EngineConfig, GameLayout};
use vlab_server::{Accounts, Server, ServerConfig};

use crate::config::{read, Overrides, Settings};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct ServeArgs {
    /// Config file; defaults to ./vlab.yaml when present.
    #[arg(long, env = "VLAB_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

pub fn run(a: ServeArgs) -> CliResult {
    let settings = Settings::resolve(&a.overrides, a.config.as_deref())?;
    let layout = GameLayout::parse(&read(&settings.game)?)
        .map_err(|e| CliError::new(e.code(), format!("{}: {e}", settings.game.display())))?;
    let accounts = if settings.accounts.exists() {
        Accounts::load(&settings.accounts).map_err(|e| CliError::new("accounts", e.to_string()))?
    } else {
        tracing::warn!(path = %settings.accounts.display(), "no account file; the admin API will refuse every login");
        Accounts::default()
    };
    if let Some(dir) = settings.journal.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let startup = serde_json::to_value(&settings).expect("settings serialize");
    let config = ServerConfig {
        addr: settings.addr,
        admin_addr: settings.admin_addr,
        journal: Some(settings.journal.clone()),
        fsync: settings.fsync,
        engine: EngineConfig {
            heartbeat: settings.heartbeat(),
            ..EngineConfig::default()
        },
        accounts,
        admin_ttl_ms: settings.admin_token_ttl_s * 1000,
        startup,
    };

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("runtime", e.to_string()))?;
    rt.block_on(async move {
        let server = Server::start(config, Arc::new(layout))
            .await
            .map_err(|e| CliError::new(e.code(), e.to_string()))?;
        println!("players: {}", server.play_url());
        println!("admin:   {}/api", server.api_url());
        println!("journal: {}", settings.journal.display());
        let _ = std::io::stdout().flush();
        let _ = tokio::signal::ctrl_c().await;
        server.shutdown().await;
        Ok(())
    })
}
