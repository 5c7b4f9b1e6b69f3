use std::path::Path;

use vlab_core::bots::BotScript;
use vlab_core::treatments::{Diagnostic, Protocol};
use vlab_core::GameLayout;

use crate::config::read;
use crate::{CliError, CliResult};

pub fn run(protocol: &Path, game: Option<&Path>, bots: Option<&Path>) -> CliResult {
    let text = read(protocol)?;
    check_protocol(protocol, &text)?;
    if let Some(g) = game {
        GameLayout::parse(&read(g)?).map_err(|e| CliError::new(e.code(), format!("{}: {e}", g.display())))?;
    }
    if let Some(b) = bots {
        BotScript::parse(&read(b)?).map_err(|e| CliError::new("bot-script", format!("{}: {e}", b.display())))?;
    }
    println!("ok: {}", protocol.display());
    Ok(())
}

pub fn check_protocol(path: &Path, text: &str) -> CliResult<Protocol> {
    let protocol: Protocol = serde_yaml::from_str(text).map_err(|e| {
        let at = e.location().map(|l| format!(":{}", l.line())).unwrap_or_default();
        CliError::new("parse-error", format!("{}{at}: {e}", path.display()))
    })?;
    if let Err(e) = protocol.validate() {
        let lines: Vec<String> = e
            .diagnostics()
            .iter()
            .map(|d| format!("{}:{}: {d}", path.display(), locate(text, &protocol, d)))
            .collect();
        let n = lines.len();
        let mut err = CliError::new(
            e.code(),
            format!("{} ({n} problem{})", lines[0], if n == 1 { "" } else { "s" }),
        );
        err.details = lines;
        return Err(err);
    }
    Ok(protocol)
}

/// Best-effort source line for a diagnostic: the top-level section, then the
/// named entry within it, then the needle after that.
fn locate(text: &str, protocol: &Protocol, d: &Diagnostic) -> usize {
    let lines: Vec<&str> = text.lines().collect();
    let head = d.path.split('.').next().unwrap_or("");
    let (section, index) = match head.split_once('[') {
        Some((s, rest)) => (s, rest.trim_end_matches(']').parse::<usize>().ok()),
        None => (head, None),
    };
    let find_from = |from: usize, pred: &dyn Fn(&str) -> bool| (from..lines.len()).find(|&i| pred(lines[i]));
    let Some(mut at) = find_from(0, &|l| l.starts_with(&format!("{section}:"))) else {
        return 1;
    };
    let entry = index.and_then(|i| match section {
        "factors" => protocol.factors.get(i).map(|f| f.name.clone()),
        "treatments" => protocol.treatments.get(i).map(|t| t.name.clone()),
        "lobbies" => protocol.lobbies.get(i).map(|l| l.name.clone()),
        "batches" => protocol.batches.get(i).map(|b| b.name.clone()),
        _ => None,
    });
    if let Some(name) = entry.filter(|n| !n.is_empty()) {
        if let Some(i) = find_from(at, &|l| l.contains("name") && contains_word(l, &name)) {
            at = i;
        }
    }
    if let Some(needle) = &d.needle {
        if let Some(i) = find_from(at, &|l| contains_word(l, needle)) {
            at = i;
        }
    }
    at + 1
}

fn contains_word(line: &str, word: &str) -> bool {
    let is_ident = |c: char| c.is_alphanumeric() || c == '_';
    line.match_indices(word).any(|(i, _)| {
        let before = line[..i].chars().next_back();
        let after = line[i + word.len()..].chars().next();
        !before.is_some_and(is_ident) && !after.is_some_and(is_ident)
    })
}
