//! Crash recovery and storage failure against a real journal file.

use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use vlab_core::journal::{parse_journal, JournalBackend};
use vlab_core::model::{ChangeOp, ScopeRef};
use vlab_core::sync::{ChangeIntent, MessageType, WireMessage};
use vlab_core::{ConnId, Engine, EngineConfig, FileBackend, GameLayout, Journal, MemoryBackend, Outbound};

const PROTOCOL: &str = "\
factors: [{name: playerCount, type: integer, values: [2]}]
treatments: [{name: t, assignments: {playerCount: 2}}]
lobbies: [{name: l, timeout: 60, strategy: fail}]
batches: [{name: b, assignment_method: complete, quotas: [{treatment: t, count: 1}], lobby: l}]
";

fn layout() -> Arc<GameLayout> {
    Arc::new(
        GameLayout::parse("rounds: 1\nstages: [{name: s, duration: 60, submit_advance: true}]\npublic_keys: [v]\n")
            .unwrap(),
    )
}

fn config() -> EngineConfig {
    EngineConfig {
        token_seed: Some(5),
        ..EngineConfig::default()
    }
}

fn send(engine: &mut Engine, conn: ConnId, seq: u64, kind: MessageType, body: Value, now: u64) -> Vec<WireMessage> {
    let text = WireMessage::new(kind, seq, body).encode();
    engine
        .receive(conn, &text, now)
        .into_iter()
        .filter_map(|o| match o {
            Outbound::Frame { conn: c, text, .. } if c == conn => Some(WireMessage::decode(&text).unwrap()),
            _ => None,
        })
        .collect()
}

/// Brings two players into a running game and returns their conns.
fn populate(engine: &mut Engine) -> Vec<ConnId> {
    let proto = engine.import_protocol("admin", PROTOCOL, 0).unwrap();
    let batch = engine.create_named_batch("admin", &proto, "b", 0).unwrap();
    engine.start_batch("admin", &batch, 0).unwrap();
    let mut conns = Vec::new();
    for who in ["ann", "bob"] {
        let c = engine.connect(10);
        send(engine, c, 1, MessageType::Hello, json!({"identifier": who}), 10);
        send(engine, c, 2, MessageType::Submit, json!({"flow": "consented"}), 10);
        send(engine, c, 3, MessageType::Submit, json!({"flow": "intro_done"}), 10);
        conns.push(c);
    }
    conns
}

#[test]
fn restart_from_file_rebuilds_acknowledged_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    let (journal, _) = Journal::open(FileBackend::open(&path, true).unwrap()).unwrap();
    let mut engine = Engine::new(config(), journal, layout());
    let conns = populate(&mut engine);
    let game = engine.world().games.keys().next().unwrap().clone();
    let stage = engine.world().games[&game].current_stage().unwrap().id.clone();
    let me = engine.player_of(conns[0]).unwrap().to_string();
    let intent = ChangeIntent {
        scope: ScopeRef::player_stage(stage, me),
        key: "v".into(),
        op: ChangeOp::Set,
        value: json!(7),
    };
    let acks = send(
        &mut engine,
        conns[0],
        4,
        MessageType::Change,
        serde_json::to_value(intent).unwrap(),
        20,
    );
    assert!(acks.iter().any(|m| m.kind == MessageType::Change), "{acks:?}");
    let before = engine.world().clone();
    let offset = engine.journal_offset();
    // simulated crash: nothing is flushed or closed
    std::mem::forget(engine);

    let (journal, parsed) = Journal::open(FileBackend::open(&path, true).unwrap()).unwrap();
    assert_eq!(parsed.records.len() as u64, offset);
    let mut engine = Engine::restore(config(), journal, &parsed, layout(), 30).unwrap();
    assert_eq!(engine.world(), &before);

    // the restored engine keeps appending after the last durable record
    engine
        .set(&ScopeRef::game(&game), "note", json!("after"), "admin", 31)
        .unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let records = parse_journal(&text).unwrap().records;
    let offsets: Vec<u64> = records.iter().map(|r| r.offset).collect();
    assert_eq!(offsets, (0..offset + 1).collect::<Vec<_>>());
}

#[test]
fn truncated_tail_is_reported_not_guessed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    let (journal, _) = Journal::open(FileBackend::open(&path, false).unwrap()).unwrap();
    let mut engine = Engine::new(config(), journal, layout());
    populate(&mut engine);
    drop(engine);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.truncate(text.len() - 10);
    std::fs::write(&path, &text).unwrap();
    let err = Journal::open(FileBackend::open(&path, false).unwrap()).unwrap_err();
    assert!(err.to_string().contains("line"), "{err}");
}

#[derive(Clone)]
struct Flaky {
    inner: MemoryBackend,
    fail: Arc<AtomicBool>,
}

impl JournalBackend for Flaky {
    fn append(&mut self, line: &str) -> io::Result<()> {
        if self.fail.load(Ordering::SeqCst) {
            return Err(io::Error::other("disk full"));
        }
        self.inner.append(line)
    }

    fn scan(&self) -> io::Result<String> {
        self.inner.scan()
    }
}

#[test]
fn storage_failure_halts_intake() {
    let fail = Arc::new(AtomicBool::new(false));
    let backend = Flaky {
        inner: MemoryBackend::new(),
        fail: fail.clone(),
    };
    let mem = backend.inner.clone();
    let (journal, _) = Journal::open(backend).unwrap();
    let mut engine = Engine::new(config(), journal, layout());
    let conns = populate(&mut engine);
    let world = engine.world().clone();
    let written = mem.contents();

    fail.store(true, Ordering::SeqCst);
    let out = send(
        &mut engine,
        conns[0],
        4,
        MessageType::Submit,
        json!({"stage": "nope"}),
        20,
    );
    let game = engine.world().games.keys().next().unwrap().clone();
    let stage = engine.world().games[&game].current_stage().unwrap().id.clone();
    let out2 = send(
        &mut engine,
        conns[1],
        4,
        MessageType::Submit,
        json!({"stage": stage}),
        21,
    );
    assert!(engine.halted().is_some());
    assert_eq!(engine.world(), &world);
    assert_eq!(mem.contents(), written);
    let last = out2.last().or(out.last()).unwrap();
    assert_eq!(last.kind, MessageType::Error);

    // later intake is refused without touching storage
    fail.store(false, Ordering::SeqCst);
    let out = send(
        &mut engine,
        conns[1],
        5,
        MessageType::Submit,
        json!({"stage": stage}),
        22,
    );
    assert_eq!(out.last().unwrap().kind, MessageType::Error);
    assert_eq!(mem.contents(), written);
    assert!(engine.tick(100_000).is_empty());
}
