//! Runs the `vlab` binary end to end.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

fn vlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("VLAB_CONFIG")
        .env_remove("VLAB_JOURNAL")
        .output()
        .expect("vlab runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Failures exit nonzero with exactly one machine-parsable error line.
fn assert_failed(o: &Output, code: &str) -> String {
    assert!(!o.status.success(), "expected failure\n{}", stdout(o));
    let err = stderr(o);
    let tagged: Vec<&str> = err.lines().filter(|l| l.starts_with("error[vlab::")).collect();
    assert_eq!(tagged.len(), 1, "{err}");
    assert!(tagged[0].starts_with(&format!("error[vlab::{code}]: ")), "{err}");
    tagged[0].to_string()
}

fn scaffolded() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = vlab(dir.path(), &["scaffold", "exp"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn scaffold_then_simulate_passes() {
    let dir = scaffolded();
    let exp = dir.path().join("exp");
    let o = vlab(
        &exp,
        &[
            "simulate",
            "--protocol",
            "protocol.yaml",
            "--bots",
            "bots.yaml",
            "--seed",
            "42",
            "--virtual-clock",
        ],
    );
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(exp.join("simulation-report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    let games = report["report"]["games"].as_array().unwrap();
    assert_eq!(games.len(), 2);
    assert!(games.iter().all(|g| g["status"] == "ended"));
    // every frame each bot exchanged is in the report
    for bot in report["report"]["bots"].as_array().unwrap() {
        let received = bot["transcript"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|t| t["dir"] == "received")
            .count();
        assert_eq!(received as u64, bot["stats"]["frames_received"].as_u64().unwrap());
    }
}

#[test]
fn scaffold_contents() {
    let dir = scaffolded();
    let exp = dir.path().join("exp");
    for f in [
        "protocol.yaml",
        "game.yaml",
        "bots.yaml",
        "vlab.yaml",
        "templates/consent.md",
        "templates/intro.md",
        "templates/outro.md",
    ] {
        assert!(exp.join(f).is_file(), "{f}");
    }
    let o = vlab(
        &exp,
        &[
            "validate",
            "protocol.yaml",
            "--game",
            "game.yaml",
            "--bots",
            "bots.yaml",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn scaffold_is_deterministic() {
    let a = scaffolded();
    let b = scaffolded();
    let files = |root: &Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    assert_eq!(files(&a.path().join("exp")), files(&b.path().join("exp")));
}

#[test]
fn scaffold_into_non_empty_dir_errors() {
    let dir = scaffolded();
    let o = vlab(dir.path(), &["scaffold", "exp"]);
    assert_failed(&o, "scaffold-target");
    let o = vlab(dir.path(), &["scaffold", "exp", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn validate_names_the_offending_factor() {
    let dir = scaffolded();
    let exp = dir.path().join("exp");
    let text = std::fs::read_to_string(exp.join("protocol.yaml")).unwrap();
    let bad = text.replace("{playerCount: 2, feedback: shown}", "{playerCount: 2, feedback: loud}");
    assert_ne!(bad, text);
    std::fs::write(exp.join("bad.yaml"), &bad).unwrap();
    let o = vlab(&exp, &["validate", "bad.yaml"]);
    let first = assert_failed(&o, "validation-error");
    assert!(first.contains("\"feedback\""), "{first}");
    let line = bad.lines().position(|l| l.contains("feedback: loud")).unwrap() + 1;
    assert!(first.contains(&format!("bad.yaml:{line}: ")), "{first}");
}

#[test]
fn failures_share_one_prefix() {
    let dir = tempfile::tempdir().unwrap();
    assert_failed(&vlab(dir.path(), &["validate", "missing.yaml"]), "io");
    assert_failed(&vlab(dir.path(), &["frobnicate"]), "usage");
    assert_failed(
        &vlab(dir.path(), &["export", "--batch", "b1", "--journal", "none.jsonl"]),
        "io",
    );
    std::fs::write(dir.path().join("vlab.yaml"), "bogus: 1\n").unwrap();
    assert_failed(&vlab(dir.path(), &["serve"]), "config");
}

#[test]
fn simulate_then_export_redacts_by_default() {
    let dir = scaffolded();
    let exp = dir.path().join("exp");
    let o = vlab(
        &exp,
        &[
            "simulate",
            "--protocol",
            "protocol.yaml",
            "--bots",
            "bots.yaml",
            "--seed",
            "7",
            "--virtual-clock",
            "--journal-out",
            "run.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(exp.join("simulation-report.json")).unwrap()).unwrap();
    let bots = report["report"]["bots"].as_array().unwrap();
    let secrets: Vec<String> = bots
        .iter()
        .flat_map(|b| {
            [
                b["identifier"].as_str().unwrap().to_string(),
                b["token"].as_str().unwrap().to_string(),
            ]
        })
        .collect();
    let batch = report["report"]["batches"][0].as_str().unwrap().to_string();

    let o = vlab(
        &exp,
        &["export", "--batch", &batch, "--journal", "run.jsonl", "--out", "plain"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut bytes = Vec::new();
    for e in std::fs::read_dir(exp.join("plain")).unwrap() {
        bytes.extend(std::fs::read(e.unwrap().path()).unwrap());
    }
    let text = String::from_utf8(bytes).unwrap();
    for s in &secrets {
        assert!(!text.contains(s.as_str()), "{s} leaked");
    }
    let rows = std::fs::read_to_string(exp.join("plain/player_rounds.csv")).unwrap();
    assert_eq!(rows.lines().count() - 1, 4 * 2);

    let o = vlab(
        &exp,
        &[
            "export",
            "--batch",
            &batch,
            "--journal",
            "run.jsonl",
            "--out",
            "full",
            "--include-identifiers",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let players = std::fs::read_to_string(exp.join("full/players.csv")).unwrap();
    assert!(players.lines().next().unwrap().contains("identifier"));
    let manifest = std::fs::read_to_string(exp.join("full/manifest.json")).unwrap();
    assert!(
        manifest.contains("\"include_identifiers\": true") || manifest.contains("\"include_identifiers\":true"),
        "{manifest}"
    );
}

fn http_get(addr: &str, path: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serve_then_healthz() {
    let dir = scaffolded();
    let exp = dir.path().join("exp");
    let o = vlab(
        &exp,
        &[
            "account",
            "add",
            "--name",
            "admin",
            "--password",
            "pw",
            "--iterations",
            "1000",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let accounts = std::fs::read_to_string(exp.join("admins.yaml")).unwrap();
    assert!(accounts.contains("admin") && !accounts.contains("pw\n"));

    let mut child = Command::new(env!("CARGO_BIN_EXE_vlab"))
        .args(["serve", "--addr", "127.0.0.1:0"])
        .current_dir(&exp)
        .env("VLAB_HEARTBEAT_INTERVAL_S", "2")
        .env_remove("VLAB_CONFIG")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first
        .trim_start_matches("players: ws://")
        .trim_end_matches("/play")
        .to_string();
    let resp = http_get(&addr, "/healthz");
    let api = http_get(&addr, "/api/batches");
    let _ = child.kill();
    let _ = child.wait();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(api.starts_with("HTTP/1.1 401"), "{api}");

    // effective settings, flag and environment included, are journaled
    let journal = std::fs::read_to_string(exp.join("data/journal.jsonl")).unwrap();
    let startup = journal
        .lines()
        .find(|l| l.contains("\"startup\""))
        .expect("startup record");
    assert!(startup.contains("\"heartbeat_interval_s\":2"), "{startup}");
    assert!(startup.contains("127.0.0.1:0"), "{startup}");
}

#[test]
fn serve_on_a_busy_port_fails() {
    let dir = scaffolded();
    let exp = dir.path().join("exp");
    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = busy.local_addr().unwrap().to_string();
    let o = vlab(&exp, &["serve", "--addr", &addr]);
    assert_failed(&o, "bind");
}
