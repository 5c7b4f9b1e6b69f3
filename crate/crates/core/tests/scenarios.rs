//! End-to-end runs of scripted bots against the engine on a virtual clock.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use vlab_core::bots::{BotScript, Direction, Scenario, ScenarioReport};
use vlab_core::events::Event;
use vlab_core::export::{export_batch, ExportOptions};
use vlab_core::journal::parse_journal;
use vlab_core::lifecycle::{check_hook_trace, Callbacks, GameLayout, HookKind};
use vlab_core::model::{ExitReason, GameStatus, ScopeRef, StageEndReason};
use vlab_core::sync::Liveness;
use vlab_core::GameCtx;

fn protocol(players: u32, games: u32) -> String {
    format!(
        "\
factors:
  - {{name: playerCount, type: integer, values: [{players}]}}
treatments:
  - {{name: t, assignments: {{playerCount: {players}}}}}
lobbies:
  - {{name: default, timeout: 300, strategy: fail}}
batches:
  - {{name: main, assignment_method: complete, quotas: [{{treatment: t, count: {games}}}], lobby: default}}
"
    )
}

const GUESS_LAYOUT: &str = "\
rounds: 20
stages:
  - {name: guess, duration: 30, submit_advance: true}
  - {name: feedback, duration: 10}
public_keys: [guess]
";

const GUESSERS: &str = "\
bots:
  - name: guesser
    count: 12
    arrive_within_ms: 5000
    think_ms: [200, 2000]
    stages:
      - stage: guess
        actions:
          - set: {scope: player_stage, key: guess, value: {uniform: [0.0, 1.0]}}
          - submit
";

fn clean(report: &ScenarioReport) {
    assert!(report.problems().is_empty(), "{:#?}", report.problems());
    let lc = common::lifecycle_violations(&report.journal);
    assert!(lc.is_empty(), "{lc:#?}");
}

fn guess_report(seed: u64) -> ScenarioReport {
    let layout = GameLayout::parse(GUESS_LAYOUT).unwrap();
    let script = BotScript::parse(GUESSERS).unwrap();
    Scenario::new(protocol(12, 1), script, Arc::new(layout))
        .seed(seed)
        .run()
        .unwrap()
}

#[test]
fn correlation_guessers_finish_twenty_rounds() {
    let report = guess_report(7);
    clean(&report);
    let g = &report.games[0];
    assert_eq!(g.status, GameStatus::Ended);
    assert_eq!(g.rounds, 20);
    assert_eq!(g.players.len(), 12);
    let shape = check_hook_trace(report.hook_trace(&g.id), false).unwrap();
    assert!(shape.complete);
    assert_eq!(shape.stages, vec![2; 20]);
    // every bot's guess is recorded in every round
    let game = &report.world.games[&g.id];
    for r in &game.rounds {
        let stage = &r.stages[0];
        for p in &g.players {
            let v = report.world.store.get(&ScopeRef::player_stage(&stage.id, p), "guess");
            assert!(v.is_some_and(|a| a.value.is_f64()), "{p} in {}", stage.id);
        }
    }
    for b in &report.bots {
        assert_eq!(b.exit_reason, Some(ExitReason::Completed));
        assert_eq!(b.stats.submits_sent, 20);
    }
}

#[test]
fn transcripts_record_every_frame() {
    let report = guess_report(1);
    for b in &report.bots {
        let sent = b.transcript.iter().filter(|e| e.dir == Direction::Sent).count() as u64;
        let got = b.transcript.iter().filter(|e| e.dir == Direction::Received).count() as u64;
        assert_eq!(got, b.stats.frames_received);
        assert!(sent >= b.stats.intents_sent + b.stats.submits_sent);
        assert!(b.transcript.windows(2).all(|w| w[0].at <= w[1].at));
    }
}

#[test]
fn same_seed_same_journal_other_seed_differs() {
    let a = guess_report(11);
    let b = guess_report(11);
    let c = guess_report(12);
    assert_eq!(a.journal, b.journal);
    assert_ne!(a.journal, c.journal);
}

#[test]
fn every_factorial_treatment_runs_a_game() {
    let text = common::factorial_protocol(
        &[
            ("social", &["none", "pairs", "groups"]),
            ("feedback", &["none", "self", "peer", "full"]),
        ],
        2,
    );
    let layout = GameLayout::parse("rounds: 2\nstages: [{name: s, duration: 20, submit_advance: true}]\n").unwrap();
    let script = BotScript::parse("bots:\n  - name: w\n    count: 24\n    stages: [{actions: [submit]}]\n").unwrap();
    let report = Scenario::new(text, script, Arc::new(layout)).seed(5).run().unwrap();
    clean(&report);
    assert_eq!(report.games.len(), 12);
    let treatments: BTreeSet<&str> = report.games.iter().map(|g| g.treatment.as_str()).collect();
    assert_eq!(treatments.len(), 12);
    assert!(report.games.iter().all(|g| g.status == GameStatus::Ended));
}

#[test]
fn two_phase_rounds_keep_the_same_players() {
    let layout = GameLayout::parse(
        "\
round_list:
  - stages: [{name: individual, duration: 120, submit_advance: true}]
  - stages: [{name: group, duration: 120, submit_advance: true}]
",
    )
    .unwrap();
    let script = BotScript::parse(
        "\
bots:
  - name: planner
    count: 12
    stages:
      - stage: individual
        actions: [{set: {scope: player_round, key: rooms, value: {int: [0, 100]}}}, submit]
      - stage: group
        actions: [{set: {scope: round, key: proposal, value: {int: [0, 100]}}}, submit]
",
    )
    .unwrap();
    let report = Scenario::new(protocol(12, 1), script, Arc::new(layout))
        .seed(2)
        .run()
        .unwrap();
    clean(&report);
    let bundle = export_batch(&report.world, &report.batches[0], &ExportOptions::default(), 0).unwrap();
    let text = String::from_utf8(bundle.file("player_rounds.csv").unwrap().to_vec()).unwrap();
    let game = &report.world.games[&report.games[0].id];
    let per_round: Vec<BTreeSet<String>> = game
        .rounds
        .iter()
        .map(|r| {
            text.lines()
                .skip(1)
                .filter(|l| l.split(',').nth(1) == Some(r.id.as_str()))
                .map(|l| l.split(',').next().unwrap().to_string())
                .collect()
        })
        .collect();
    assert_eq!(per_round.len(), 2);
    assert_eq!(per_round[0].len(), 12);
    assert_eq!(per_round[0], per_round[1]);
}

#[test]
fn killed_socket_resumes_same_player() {
    let layout =
        GameLayout::parse("rounds: 3\nstages: [{name: s, duration: 60, submit_advance: true}]\npublic_keys: [v]\n")
            .unwrap();
    let script = BotScript::parse(
        "\
bots:
  - name: w
    count: 4
    stages:
      - round: 1
        only: [0]
        actions: [{disconnect: {reconnect_after_ms: 4000}}, {set: {scope: player_stage, key: v, value: 1}}, submit]
      - actions: [{set: {scope: player_stage, key: v, value: {int: [0, 9]}}}, submit]
",
    )
    .unwrap();
    let report = Scenario::new(protocol(4, 1), script, Arc::new(layout))
        .seed(4)
        .run()
        .unwrap();
    clean(&report);
    let b0 = &report.bots[0];
    assert_eq!(b0.stats.resumes, 1);
    assert_eq!(b0.exit_reason, Some(ExitReason::Completed));
    assert_eq!(report.world.players.len(), 4);
    let ids: BTreeSet<_> = report.bots.iter().map(|b| b.player_id.clone().unwrap()).collect();
    assert_eq!(ids.len(), 4);
    let parsed = parse_journal(&report.journal).unwrap();
    let resumed = parsed
        .records
        .iter()
        .filter(
            |r| matches!(&r.body, Event::Connected { player, resumed: true } if Some(player) == b0.player_id.as_ref()),
        )
        .count();
    assert_eq!(resumed, 1);
    let bundle = export_batch(&report.world, &report.batches[0], &ExportOptions::default(), 0).unwrap();
    assert_eq!(
        bundle
            .manifest
            .tables
            .iter()
            .find(|t| t.name == "players")
            .unwrap()
            .rows,
        4
    );
}

#[test]
fn writes_due_while_offline_are_reported_on_resume() {
    let layout =
        GameLayout::parse("rounds: 2\nstages: [{name: s, duration: 60, submit_advance: true}]\npublic_keys: [v]\n")
            .unwrap();
    let script = BotScript::parse(
        "\
bots:
  - name: w
    count: 2
    think_ms: [200, 200]
    stages:
      - round: 0
        only: [0]
        actions: [{disconnect: {reconnect_after_ms: 5000}}, {set: {scope: player_stage, key: v, value: 1}}, {set: {scope: player_stage, key: v, value: 2}}]
      - actions: [{set: {scope: player_stage, key: v, value: 3}}, submit]
",
    )
    .unwrap();
    let report = Scenario::new(protocol(2, 1), script, Arc::new(layout))
        .seed(11)
        .run()
        .unwrap();
    let b0 = &report.bots[0];
    assert_eq!(b0.stats.resumes, 1);
    assert_eq!(b0.stats.dropped_writes, 2);
    assert!(
        b0.stats.errors.iter().any(|e| e == "intents-dropped:2"),
        "{:?}",
        b0.stats.errors
    );
    assert_eq!(report.bots[1].stats.dropped_writes, 0);
}

fn policy_run(mode: &str, script: &str) -> ScenarioReport {
    let layout = GameLayout::parse(&format!(
        "rounds: 2\nstages: [{{name: s, duration: 90, submit_advance: true}}]\ndisconnect: {{mode: {mode}, grace_s: 10}}\n"
    ))
    .unwrap();
    let script = BotScript::parse(script).unwrap();
    Scenario::new(protocol(3, 1), script, Arc::new(layout))
        .seed(9)
        .run()
        .unwrap()
}

const LEAVER: &str = "\
bots:
  - name: w
    count: 3
    stages:
      - round: 0
        only: [0]
        actions: [{disconnect: {}}]
      - actions: [submit]
";

#[test]
fn continue_without_finishes_with_reduced_roster() {
    let report = policy_run("continue_without", LEAVER);
    clean(&report);
    let g = &report.world.games[&report.games[0].id];
    assert_eq!(g.status, GameStatus::Ended);
    assert_eq!(g.active.len(), 2);
    assert_eq!(g.rounds[0].stages[0].ended, Some(StageEndReason::AllSubmitted));
    let leaver = report.bots[0].player_id.as_deref().unwrap();
    assert!(report.world.players[leaver].dropped);
    for b in &report.bots[1..] {
        assert_eq!(b.exit_reason, Some(ExitReason::Completed));
    }
}

#[test]
fn cancel_trial_cancels_and_sends_everyone_out() {
    let report = policy_run("cancel_trial", LEAVER);
    clean(&report);
    let g = &report.world.games[&report.games[0].id];
    assert_eq!(g.status, GameStatus::Cancelled);
    assert_eq!(g.end_reason.as_deref(), Some("player_disconnected"));
    for b in &report.bots[1..] {
        assert_eq!(b.exit_reason, Some(ExitReason::Cancelled));
    }
    let shape = check_hook_trace(report.hook_trace(&g.id), true).unwrap();
    assert!(!shape.complete);
}

#[test]
fn pause_trial_freezes_remaining_time() {
    let script = "\
bots:
  - name: w
    count: 3
    think_ms: [1000, 1000]
    stages:
      - round: 0
        only: [0]
        actions: [{disconnect: {reconnect_after_ms: 60000}}, submit]
      - actions: [submit]
";
    let report = policy_run("pause_trial", script);
    clean(&report);
    let parsed = parse_journal(&report.journal).unwrap();
    let (paused_at, remaining) = parsed
        .records
        .iter()
        .find_map(|r| match &r.body {
            Event::GamePaused { remaining_ms, .. } => Some((r.at, remaining_ms.unwrap())),
            _ => None,
        })
        .expect("game paused");
    let (resumed_at, deadline) = parsed
        .records
        .iter()
        .find_map(|r| match &r.body {
            Event::GameResumed { deadline, .. } => Some((r.at, deadline.unwrap())),
            _ => None,
        })
        .expect("game resumed");
    assert!(
        resumed_at - paused_at >= 30_000,
        "pause lasted {} ms",
        resumed_at - paused_at
    );
    assert_eq!(deadline - resumed_at, remaining);
    let stage = &report.world.games[&report.games[0].id].rounds[0].stages[0];
    assert_eq!(remaining, stage.started_at.unwrap() + 90_000 - paused_at);
    assert_eq!(report.games[0].status, GameStatus::Ended);
}

#[test]
fn silent_bot_goes_stale_then_dead_then_dropped() {
    let script = "\
bots:
  - name: w
    count: 3
    stages:
      - round: 1
        only: [0]
        actions: [{silence: {ms: 60000}}]
      - actions: [submit]
";
    let report = policy_run("continue_without", script);
    clean(&report);
    let p = report.bots[0].player_id.clone().unwrap();
    let parsed = parse_journal(&report.journal).unwrap();
    let trail: Vec<&str> = parsed
        .records
        .iter()
        .filter_map(|r| match &r.body {
            Event::Liveness { player, state } if *player == p => Some(match state {
                Liveness::Alive => "alive",
                Liveness::Stale => "stale",
                Liveness::Dead => "dead",
            }),
            Event::RosterRemoved { player, .. } if *player == p => Some("removed"),
            _ => None,
        })
        .collect();
    assert_eq!(&trail[..3], &["stale", "dead", "removed"], "{trail:?}");
    assert!(report.world.players[&p].dropped);
}

#[test]
fn default_export_carries_no_identifiers_or_tokens() {
    let report = guess_report(3);
    let batch = &report.batches[0];
    let bundle = export_batch(&report.world, batch, &ExportOptions::default(), 0).unwrap();
    let bytes = bundle.all_bytes();
    let hay = String::from_utf8_lossy(&bytes);
    for b in &report.bots {
        assert!(!hay.contains(&b.identifier), "{} leaked", b.identifier);
        let token = b.token.as_deref().unwrap();
        assert!(!hay.contains(token), "token leaked");
    }
    let players = String::from_utf8(bundle.file("players.csv").unwrap().to_vec()).unwrap();
    assert!(!players.lines().next().unwrap().split(',').any(|c| c == "identifier"));
    assert!(!bundle.manifest.include_identifiers);

    let opted = export_batch(
        &report.world,
        batch,
        &ExportOptions {
            include_identifiers: true,
            ..ExportOptions::default()
        },
        0,
    )
    .unwrap();
    let text = String::from_utf8(opted.file("players.csv").unwrap().to_vec()).unwrap();
    assert!(text.lines().next().unwrap().split(',').any(|c| c == "identifier"));
    assert!(opted.manifest.include_identifiers);
    let player_rounds = &opted
        .manifest
        .tables
        .iter()
        .find(|t| t.name == "player_rounds")
        .unwrap();
    assert_eq!(player_rounds.rows, 12 * 20);
}

#[test]
fn export_is_deterministic_from_journal() {
    let report = guess_report(8);
    let replayed = vlab_core::journal::replay_text(&report.journal, None).unwrap().world;
    let batch = &report.batches[0];
    for format in ["csv", "jsonl"] {
        let opts = ExportOptions {
            format: format.parse().unwrap(),
            ..ExportOptions::default()
        };
        let a = export_batch(&report.world, batch, &opts, 5).unwrap();
        let b = export_batch(&replayed, batch, &opts, 5).unwrap();
        assert_eq!(a, b);
    }
}

struct Logger(GameLayout);

impl Callbacks for Logger {
    fn on_game_init(&self, ctx: &mut GameCtx<'_>) -> vlab_core::lifecycle::CallbackResult {
        self.0.on_game_init(ctx)
    }

    fn on_stage_start(
        &self,
        ctx: &mut GameCtx<'_>,
        round: usize,
        stage: usize,
    ) -> vlab_core::lifecycle::CallbackResult {
        let scope = ctx.game_scope();
        ctx.log(
            &scope,
            "secret-audit-entry",
            serde_json::json!({"round": round, "stage": stage}),
        )
    }
}

#[test]
fn log_entries_never_reach_clients() {
    let layout = GameLayout::parse("rounds: 2\nstages: [{name: s, duration: 20, submit_advance: true}]\n").unwrap();
    let script = BotScript::parse("bots:\n  - name: w\n    count: 2\n    stages: [{actions: [submit]}]\n").unwrap();
    let report = Scenario::new(protocol(2, 1), script, Arc::new(Logger(layout)))
        .seed(1)
        .run()
        .unwrap();
    clean(&report);
    assert_eq!(report.world.logs.len(), 2);
    for b in &report.bots {
        assert!(b.transcript.iter().all(|e| !e.text.contains("secret-audit-entry")));
    }
    let hooks = report.hook_trace(&report.games[0].id);
    assert_eq!(hooks.iter().filter(|h| h.hook == HookKind::StageStart).count(), 2);
}

#[test]
fn fuzzed_writes_converge() {
    let layout = GameLayout::parse("rounds: 1\nstages: [{name: s, duration: 60}]\npublic_keys: [k0, k1]\n").unwrap();
    let script = BotScript::parse(
        "\
bots:
  - name: f
    count: 8
    stages:
      - actions:
          - fuzz:
              count: 125
              keys: [k0, k1, k2, k3]
              scopes: [game, round, stage, player, player_round, player_stage]
              append_ratio: 0.3
              spread_ms: 20000
",
    )
    .unwrap();
    for seed in 0..3 {
        let report = Scenario::new(protocol(8, 1), script.clone(), Arc::new(layout.clone()))
            .seed(seed)
            .run()
            .unwrap();
        clean(&report);
        let sent: u64 = report.bots.iter().map(|b| b.stats.intents_sent).sum();
        assert_eq!(sent, 1000, "seed {seed}");
        assert!(report.bots.iter().all(|b| b.stats.errors.is_empty()), "seed {seed}");
    }
}
