use std::path::Path;

use crate::{CliError, CliResult};

/// Scaffold files and their contents, in write order.
pub const FILES: &[(&str, &str)] = &[
    ("README.md", include_str!("../scaffold/README.md")),
    ("vlab.yaml", include_str!("../scaffold/vlab.yaml")),
    ("protocol.yaml", include_str!("../scaffold/protocol.yaml")),
    ("game.yaml", include_str!("../scaffold/game.yaml")),
    ("bots.yaml", include_str!("../scaffold/bots.yaml")),
    ("templates/consent.md", include_str!("../scaffold/templates/consent.md")),
    ("templates/intro.md", include_str!("../scaffold/templates/intro.md")),
    ("templates/outro.md", include_str!("../scaffold/templates/outro.md")),
];

pub fn scaffold(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::new(
                "scaffold-target",
                format!("{} exists and is not a directory", dir.display()),
            ));
        }
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::new(
                "scaffold-target",
                format!("{} is not empty (use --force to write anyway)", dir.display()),
            ));
        }
    }
    for (name, body) in FILES {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
    }
    println!("created {} files in {}", FILES.len(), dir.display());
    println!(
        "next: cd {} && vlab simulate --protocol protocol.yaml --bots bots.yaml --virtual-clock",
        dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    use vlab_core::bots::BotScript;
    use vlab_core::treatments::parse_protocol;
    use vlab_core::GameLayout;

    #[test]
    fn bundled_files_parse() {
        let get = |n: &str| FILES.iter().find(|(f, _)| *f == n).unwrap().1;
        let p = parse_protocol(get("protocol.yaml")).unwrap();
        assert_eq!(p.treatments.len(), 2);
        GameLayout::parse(get("game.yaml")).unwrap();
        let bots = BotScript::parse(get("bots.yaml")).unwrap();
        let seats: u32 = p.batches[0]
            .quotas
            .iter()
            .map(|q| q.count * p.treatment(&q.treatment).unwrap().player_count())
            .sum();
        assert_eq!(bots.total_bots(), seats as usize);
        assert!(get("templates/consent.md").contains("Consent"));
    }

    #[test]
    fn refuses_non_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "").unwrap();
        let e = scaffold(dir.path(), false).unwrap_err();
        assert_eq!(e.code, "scaffold-target");
        scaffold(dir.path(), true).unwrap();
        assert!(dir.path().join("x").exists());
        assert!(dir.path().join("templates/consent.md").exists());
    }
}
