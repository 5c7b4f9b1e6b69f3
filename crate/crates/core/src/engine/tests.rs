use std::sync::Arc;

use serde_json::json;

use super::*;
use crate::lifecycle::{DisconnectMode, DisconnectPolicy, GameLayout, HookKind};
use crate::model::{ExitReason, ScopeRef, StageEndReason};
use crate::sync::{ChangeBody, ErrorBody, TransitionBody, WelcomeBody};

fn protocol(players: u32) -> String {
    format!(
        "\
factors: [{{name: playerCount, type: integer, values: [{players}]}}]
treatments: [{{name: t, assignments: {{playerCount: {players}}}}}]
lobbies: [{{name: l, timeout: 60, strategy: fail}}]
batches:
  - {{name: b, assignment_method: complete, quotas: [{{treatment: t, count: 1}}], lobby: l}}
"
    )
}

fn layout(mode: &str) -> GameLayout {
    GameLayout::parse(&format!(
        "rounds: 2\nstages:\n  - {{name: a, duration: 60, submit_advance: true}}\n  - {{name: b, duration: 60, submit_advance: true}}\npublic_keys: [guess]\ndisconnect: {{mode: {mode}, grace_s: 10}}\n"
    ))
    .unwrap()
}

struct Client {
    conn: ConnId,
    seq: u64,
    player: Option<String>,
    token: Option<String>,
    inbox: Vec<WireMessage>,
}

struct Rig {
    engine: Engine,
    now: u64,
}

impl Rig {
    fn new(players: u32, mode: &str) -> Self {
        let (journal, _) = Journal::in_memory();
        let config = EngineConfig {
            token_seed: Some(1),
            ..EngineConfig::default()
        };
        let mut engine = Engine::new(config, journal, Arc::new(layout(mode)));
        let proto = engine.import_protocol("admin", &protocol(players), 0).unwrap();
        let batch = engine.create_named_batch("admin", &proto, "b", 0).unwrap();
        engine.start_batch("admin", &batch, 0).unwrap();
        Self { engine, now: 0 }
    }

    fn route(&self, outs: Vec<Outbound>, clients: &mut [&mut Client]) {
        for o in outs {
            if let Outbound::Frame { conn, text, .. } = o {
                if let Some(c) = clients.iter_mut().find(|c| c.conn == conn) {
                    c.inbox.push(WireMessage::decode(&text).unwrap());
                }
            }
        }
    }

    fn connect(&mut self) -> Client {
        Client {
            conn: self.engine.connect(self.now),
            seq: 0,
            player: None,
            token: None,
            inbox: Vec::new(),
        }
    }

    fn send(&mut self, c: &mut Client, kind: MessageType, body: Value) -> Vec<Outbound> {
        c.seq += 1;
        let text = WireMessage::new(kind, c.seq, body).encode();
        let outs = self.engine.receive(c.conn, &text, self.now);
        let mine: Vec<Outbound> = outs.iter().filter(|o| o.conn() == c.conn).cloned().collect();
        for o in &mine {
            if let Outbound::Frame { text, .. } = o {
                let m = WireMessage::decode(text).unwrap();
                if m.kind == MessageType::Welcome {
                    let w: WelcomeBody = m.body_as().unwrap();
                    c.player = Some(w.player_id);
                    if w.token.is_some() {
                        c.token = w.token;
                    }
                }
                c.inbox.push(m);
            }
        }
        outs
    }

    fn join(&mut self, identifier: &str) -> Client {
        let mut c = self.connect();
        self.send(&mut c, MessageType::Hello, json!({"identifier": identifier}));
        self.send(&mut c, MessageType::Submit, json!({"flow": "consented"}));
        self.send(&mut c, MessageType::Submit, json!({"flow": "intro_done"}));
        c
    }

    fn game(&self) -> &crate::model::Game {
        self.engine.world().games.values().next().unwrap()
    }

    fn stage_id(&self) -> String {
        self.game().current_stage().unwrap().id.clone()
    }

    fn submit(&mut self, c: &mut Client) -> Vec<Outbound> {
        let stage = self.stage_id();
        self.send(c, MessageType::Submit, json!({"stage": stage}))
    }

    fn advance(&mut self, to: u64) {
        while self.now < to {
            let next = self.engine.next_deadline().unwrap_or(to).min(to).max(self.now + 1);
            self.now = next;
            self.engine.tick(next);
        }
    }

    /// Keeps the listed clients alive by acking every ping up to `to`.
    fn advance_with(&mut self, to: u64, alive: &mut [&mut Client]) {
        while self.now < to {
            let next = self.engine.next_deadline().unwrap_or(to).min(to).max(self.now + 1);
            self.now = next;
            let outs = self.engine.tick(next);
            self.route(outs.clone(), alive);
            for c in alive.iter_mut() {
                let pinged = outs.iter().any(
                    |o| matches!(o, Outbound::Frame { conn, kind: MessageType::Heartbeat, .. } if *conn == c.conn),
                );
                if pinged {
                    self.send(c, MessageType::HeartbeatAck, json!({"at": next}));
                }
            }
        }
    }
}

fn last_error(c: &Client) -> Option<ErrorBody> {
    c.inbox
        .iter()
        .rev()
        .find(|m| m.kind == MessageType::Error)
        .map(|m| m.body_as().unwrap())
}

fn phase(rig: &Rig, c: &Client) -> Phase {
    rig.engine.world().players[c.player.as_deref().unwrap()].phase
}

#[test]
fn hello_creates_player_and_issues_token() {
    let mut rig = Rig::new(2, "continue_without");
    let mut c = rig.connect();
    rig.send(&mut c, MessageType::Hello, json!({"identifier": "worker-1"}));
    let w: WelcomeBody = c.inbox[0].body_as().unwrap();
    assert_eq!(c.inbox[0].kind, MessageType::Welcome);
    assert!(!w.resumed);
    assert_eq!(w.state.phase, Phase::Consent);
    assert!(w.token.as_deref().is_some_and(|t| t.len() >= 32));
    assert_eq!(rig.engine.world().players.len(), 1);
}

#[test]
fn token_resume_keeps_player_id() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.join("worker-1");
    let id = a.player.clone().unwrap();
    rig.engine.disconnect(a.conn, rig.now);
    rig.now += 1_000;
    let mut b = rig.connect();
    rig.send(&mut b, MessageType::Hello, json!({"token": a.token.clone().unwrap()}));
    let w: WelcomeBody = b.inbox[0].body_as().unwrap();
    assert!(w.resumed);
    assert_eq!(w.player_id, id);
    assert_eq!(w.state.phase, Phase::Lobby);
    assert!(w.token.is_none());
    assert_eq!(rig.engine.world().players.len(), 1);
    a.inbox.clear();
}

#[test]
fn unknown_token_is_rejected() {
    let mut rig = Rig::new(2, "continue_without");
    let mut c = rig.connect();
    rig.send(&mut c, MessageType::Hello, json!({"token": "nope"}));
    assert_eq!(last_error(&c).unwrap().code, "auth-failed");
    assert!(rig.engine.world().players.is_empty());
}

#[test]
fn frames_before_hello_and_replayed_seq_rejected() {
    let mut rig = Rig::new(2, "continue_without");
    let mut c = rig.connect();
    rig.send(&mut c, MessageType::Subscribe, json!({}));
    assert_eq!(last_error(&c).unwrap().code, "auth-failed");
    rig.send(&mut c, MessageType::Hello, json!({"identifier": "w"}));
    c.seq -= 1;
    rig.send(&mut c, MessageType::Subscribe, json!({}));
    assert_eq!(last_error(&c).unwrap().code, "bad-seq");
}

#[test]
fn second_login_supersedes_first_socket() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.connect();
    rig.send(&mut a, MessageType::Hello, json!({"identifier": "w"}));
    let mut b = rig.connect();
    let outs = rig.send(&mut b, MessageType::Hello, json!({"token": a.token.clone().unwrap()}));
    rig.route(outs.clone(), &mut [&mut a]);
    assert_eq!(last_error(&a).unwrap().code, "second-login");
    assert!(outs
        .iter()
        .any(|o| matches!(o, Outbound::Close { conn } if *conn == a.conn)));
    assert_eq!(rig.engine.player_of(b.conn), a.player.as_deref());
    assert_eq!(rig.engine.player_of(a.conn), None);
    // the old socket gets nothing more, even as the session moves on
    let mut later = rig.send(&mut b, MessageType::Submit, json!({"flow": "consented"}));
    later.extend(rig.send(&mut b, MessageType::Submit, json!({"flow": "intro_done"})));
    rig.now += 30_000;
    later.extend(rig.engine.tick(rig.now));
    assert!(!later.is_empty());
    assert!(later.iter().all(|o| o.conn() != a.conn));
    let stale = rig.engine.receive(
        a.conn,
        &WireMessage::new(MessageType::Subscribe, 2, json!({})).encode(),
        rig.now,
    );
    assert!(stale.is_empty());
}

#[test]
fn game_starts_when_lobby_fills_and_hooks_run_in_order() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.join("a");
    assert_eq!(phase(&rig, &a), Phase::Lobby);
    let mut b = rig.join("b");
    assert_eq!(phase(&rig, &a), Phase::Game);
    assert_eq!(phase(&rig, &b), Phase::Game);
    assert_eq!(rig.game().status, GameStatus::Running);
    for _ in 0..4 {
        rig.submit(&mut a);
        rig.submit(&mut b);
    }
    assert_eq!(rig.game().status, GameStatus::Ended);
    let trace: Vec<&str> = rig.engine.world().hooks[&rig.game().id]
        .iter()
        .map(|h| h.hook.short())
        .collect();
    assert_eq!(trace.join(" "), "init rs ss se ss se re rs ss se ss se re ge");
    assert_eq!(phase(&rig, &a), Phase::Outro);
    assert_eq!(
        rig.engine.world().players[a.player.as_deref().unwrap()].exit_reason,
        Some(ExitReason::Completed)
    );
}

#[test]
fn stale_stage_submit_is_rejected() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.join("a");
    let mut b = rig.join("b");
    let first = rig.stage_id();
    rig.submit(&mut a);
    rig.submit(&mut b);
    rig.send(&mut a, MessageType::Submit, json!({"stage": first}));
    assert_eq!(last_error(&a).unwrap().code, "stale-stage");
}

#[test]
fn stage_ends_on_timer() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.join("a");
    let mut b = rig.join("b");
    let first = rig.stage_id();
    rig.advance_with(60_000, &mut [&mut a, &mut b]);
    let g = rig.game();
    assert_eq!(g.rounds[0].stages[0].id, first);
    assert_eq!(g.rounds[0].stages[0].ended, Some(StageEndReason::Timer));
    assert_eq!(g.rounds[0].stages[0].ended_at, Some(60_000));
    assert_ne!(rig.stage_id(), first);
}

#[test]
fn writes_outside_own_scopes_forbidden() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.join("a");
    let b = rig.join("b");
    let other = ScopeRef::player(b.player.as_deref().unwrap());
    rig.send(
        &mut a,
        MessageType::Change,
        json!({"scope": other, "key": "x", "op": "set", "value": 1}),
    );
    assert_eq!(last_error(&a).unwrap().code, "forbidden");
}

#[test]
fn public_round_write_reaches_teammate_private_does_not() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.join("a");
    let mut b = rig.join("b");
    let stage = rig.stage_id();
    let pa = a.player.clone().unwrap();
    b.inbox.clear();
    let scope = ScopeRef::player_stage(&stage, &pa);
    let outs = rig.send(
        &mut a,
        MessageType::Change,
        json!({"scope": scope, "key": "guess", "op": "set", "value": 0.3}),
    );
    let outs2 = rig.send(
        &mut a,
        MessageType::Change,
        json!({"scope": scope, "key": "secret", "op": "set", "value": 9}),
    );
    rig.route(outs.into_iter().chain(outs2).collect(), &mut [&mut b]);
    let seen: Vec<ChangeBody> = b
        .inbox
        .iter()
        .filter(|m| m.kind == MessageType::Change)
        .map(|m| m.body_as().unwrap())
        .collect();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].key, "guess");
    let own: Vec<ChangeBody> = a
        .inbox
        .iter()
        .filter(|m| m.kind == MessageType::Change)
        .map(|m| m.body_as().unwrap())
        .collect();
    assert_eq!(own.len(), 2);
}

#[test]
fn continue_without_drops_player_and_stage_completes() {
    let mut rig = Rig::new(3, "continue_without");
    let mut a = rig.join("a");
    let mut b = rig.join("b");
    let c = rig.join("c");
    let stage = rig.stage_id();
    rig.submit(&mut a);
    rig.submit(&mut b);
    rig.engine.disconnect(c.conn, rig.now);
    // 3 missed 5 s intervals, then 10 s grace
    rig.advance_with(26_000, &mut [&mut a, &mut b]);
    let g = rig.game();
    assert_eq!(g.status, GameStatus::Running);
    assert_eq!(g.active.len(), 2);
    assert!(!g.active.contains(c.player.as_deref().unwrap()));
    assert_eq!(g.rounds[0].stages[0].id, stage);
    assert_eq!(g.rounds[0].stages[0].ended, Some(StageEndReason::AllSubmitted));
    assert!(rig.engine.world().players[c.player.as_deref().unwrap()].dropped);
}

#[test]
fn cancel_trial_sends_everyone_to_outro() {
    let mut rig = Rig::new(2, "cancel_trial");
    let mut a = rig.join("a");
    let b = rig.join("b");
    rig.engine.disconnect(b.conn, rig.now);
    rig.advance_with(30_000, &mut [&mut a]);
    let g = rig.game();
    assert_eq!(g.status, GameStatus::Cancelled);
    assert_eq!(g.end_reason.as_deref(), Some("player_disconnected"));
    assert_eq!(phase(&rig, &a), Phase::Outro);
    assert_eq!(
        rig.engine.world().players[a.player.as_deref().unwrap()].exit_reason,
        Some(ExitReason::Cancelled)
    );
    let t: Vec<TransitionBody> = a
        .inbox
        .iter()
        .filter(|m| m.kind == MessageType::Transition)
        .map(|m| m.body_as().unwrap())
        .collect();
    assert_eq!(t.last().unwrap().state.phase, Phase::Outro);
}

#[test]
fn pause_trial_preserves_remaining_time() {
    let mut rig = Rig::new(2, "pause_trial");
    let mut a = rig.join("a");
    let b = rig.join("b");
    let started = rig.now;
    rig.engine.disconnect(b.conn, rig.now);
    // b is silent from the start: dead at 15 s, policy after 10 s grace
    let paused_at = started + 25_000;
    rig.advance_with(paused_at, &mut [&mut a]);
    let g = rig.game();
    assert_eq!(g.status, GameStatus::Paused);
    let remaining = g.paused.as_ref().unwrap().remaining_ms.unwrap();
    assert_eq!(remaining, 60_000 - 25_000);
    assert_eq!(g.current_stage().unwrap().deadline, None);
    rig.advance_with(paused_at + 30_000, &mut [&mut a]);
    assert_eq!(rig.game().status, GameStatus::Paused);
    let mut b2 = rig.connect();
    rig.send(&mut b2, MessageType::Hello, json!({"token": b.token.clone().unwrap()}));
    let g = rig.game();
    assert_eq!(g.status, GameStatus::Running);
    assert_eq!(g.current_stage().unwrap().deadline, Some(rig.now + remaining));
    rig.send(&mut b2, MessageType::Submit, json!({"flow": "consented"}));
    assert_eq!(last_error(&b2).unwrap().code, "flow-violation");
}

#[test]
fn submit_while_paused_is_rejected() {
    let mut rig = Rig::new(2, "pause_trial");
    let mut a = rig.join("a");
    let b = rig.join("b");
    rig.engine.disconnect(b.conn, rig.now);
    rig.advance_with(26_000, &mut [&mut a]);
    assert_eq!(rig.game().status, GameStatus::Paused);
    rig.submit(&mut a);
    assert_eq!(last_error(&a).unwrap().code, "game-paused");
}

#[test]
fn lobby_timeout_fail_sends_members_to_outro() {
    let mut rig = Rig::new(3, "continue_without");
    let mut a = rig.join("a");
    rig.advance_with(61_000, &mut [&mut a]);
    assert_eq!(rig.game().status, GameStatus::Cancelled);
    assert_eq!(phase(&rig, &a), Phase::Outro);
    assert_eq!(
        rig.engine.world().players[a.player.as_deref().unwrap()].exit_reason,
        Some(ExitReason::LobbyTimeout)
    );
}

#[test]
fn silent_player_goes_stale_then_dead() {
    let mut rig = Rig::new(2, "continue_without");
    let a = rig.join("a");
    let p = a.player.clone().unwrap();
    rig.advance(5_000);
    assert_eq!(rig.engine.liveness(&p), Some(Liveness::Stale));
    rig.advance(15_000);
    assert_eq!(rig.engine.liveness(&p), Some(Liveness::Dead));
}

#[test]
fn failing_callback_cancels_game() {
    struct Broken;
    impl Callbacks for Broken {
        fn on_game_init(&self, ctx: &mut GameCtx<'_>) -> crate::lifecycle::CallbackResult {
            ctx.add_round(vec![crate::model::StageDef {
                name: "s".into(),
                duration: Some(10),
                submit_advance: false,
            }])?;
            Ok(())
        }
        fn on_stage_start(&self, _: &mut GameCtx<'_>, _: usize, _: usize) -> crate::lifecycle::CallbackResult {
            Err(crate::lifecycle::CallbackError::new("boom"))
        }
        fn disconnect_policy(&self, _: &crate::treatments::Treatment) -> DisconnectPolicy {
            DisconnectPolicy::new(DisconnectMode::ContinueWithout)
        }
    }
    let (journal, _) = Journal::in_memory();
    let mut engine = Engine::new(EngineConfig::default(), journal, Arc::new(Broken));
    let proto = engine.import_protocol("admin", &protocol(1), 0).unwrap();
    let batch = engine.create_named_batch("admin", &proto, "b", 0).unwrap();
    engine.start_batch("admin", &batch, 0).unwrap();
    let mut rig = Rig { engine, now: 0 };
    let a = rig.join("a");
    let g = rig.game();
    assert_eq!(g.status, GameStatus::Cancelled);
    assert!(g.end_reason.as_deref().unwrap().starts_with("callback_error"));
    assert_eq!(phase(&rig, &a), Phase::Outro);
    // the failing hook is recorded before its callback runs
    let trace = &rig.engine.world().hooks[&g.id];
    assert_eq!(trace.last().unwrap().hook, HookKind::StageStart);
}

#[test]
fn restore_from_journal_matches_live_state() {
    let mut rig = Rig::new(2, "continue_without");
    let mut a = rig.join("a");
    let mut b = rig.join("b");
    rig.submit(&mut a);
    rig.submit(&mut b);
    let text = rig.engine.journal_text().unwrap();
    let replayed = crate::journal::replay_text(&text, None).unwrap();
    assert!(replayed.halt.is_none());
    assert_eq!(&replayed.world, rig.engine.world());
}
