use std::path::PathBuf;

use clap::Args;

use vlab_core::export::{export_batch, ExportFormat, ExportOptions};
use vlab_core::journal::replay_text;

use crate::config::{read, Overrides, Settings};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    batch: String,
    #[arg(long, default_value = "csv")]
    format: ExportFormat,
    /// Keep the recruitment-source identifier column in the players table.
    #[arg(long)]
    include_identifiers: bool,
    /// Allow exporting a batch that has not finished.
    #[arg(long)]
    partial: bool,
    /// Output directory; defaults to export-<batch>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Journal file; defaults to the one named in the config.
    #[arg(long, env = "VLAB_JOURNAL")]
    journal: Option<PathBuf>,
    #[arg(long, env = "VLAB_CONFIG")]
    config: Option<PathBuf>,
}

pub fn run(a: ExportArgs) -> CliResult {
    let journal = match a.journal {
        Some(j) => j,
        None => Settings::resolve(&Overrides::default(), a.config.as_deref())?.journal,
    };
    let text = read(&journal)?;
    let replayed =
        replay_text(&text, None).map_err(|e| CliError::new("journal", format!("{}: {e}", journal.display())))?;
    if let Some(h) = &replayed.halt {
        return Err(CliError::new(
            "journal-corrupt",
            format!(
                "{}: replay stopped at line {} after offset {}: {}",
                journal.display(),
                h.line,
                h.last_valid.map_or("none".to_string(), |o| o.to_string()),
                h.message
            ),
        ));
    }
    let options = ExportOptions {
        format: a.format,
        include_identifiers: a.include_identifiers,
        partial: a.partial,
    };
    let offset = replayed.last_offset.map_or(0, |o| o + 1);
    let bundle = export_batch(&replayed.world, &a.batch, &options, offset)
        .map_err(|e| CliError::new(e.code(), e.to_string()))?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("export-{}", a.batch)));
    bundle.write_to(&out).map_err(|e| CliError::io(&out, e))?;
    println!("wrote {} files to {}", bundle.files.len(), out.display());
    if a.include_identifiers {
        println!("note: the players table includes participant identifiers");
    }
    Ok(())
}
