use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Args;
use serde::Serialize;
use serde_json::json;

use vlab_core::bots::{BotScript, BotStats, GameOutcome, Scenario};
use vlab_core::journal::replay_text;
use vlab_core::lifecycle::Phase;
use vlab_core::model::GameStatus;
use vlab_core::sync::HeartbeatConfig;
use vlab_core::{EngineConfig, GameLayout, World};
use vlab_server::{Server, ServerConfig};

use crate::config::read;
use crate::validate::check_protocol;
use crate::{CliError, CliResult};

const ACTOR: &str = "simulate";

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    bots: PathBuf,
    /// Game file; defaults to game.yaml beside the protocol.
    #[arg(long)]
    game: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip timer waits deterministically instead of running on the wall clock
    /// against a loopback server.
    #[arg(long)]
    virtual_clock: bool,
    /// Batches from the protocol to run; all of them when omitted.
    #[arg(long = "batch")]
    batches: Vec<String>,
    /// Structured report output.
    #[arg(long, default_value = "simulation-report.json")]
    report: PathBuf,
    /// Also write the journal here.
    #[arg(long)]
    journal_out: Option<PathBuf>,
    /// Give up after this long (virtual or wall time).
    #[arg(long, default_value_t = 3600)]
    timeout_s: u64,
    #[arg(long, env = "VLAB_HEARTBEAT_INTERVAL_S", default_value_t = 5)]
    heartbeat_interval_s: u64,
    #[arg(long, env = "VLAB_HEARTBEAT_MISSES", default_value_t = 3)]
    heartbeat_misses: u32,
}

#[derive(Serialize)]
struct LiveBot {
    identifier: String,
    player_id: Option<String>,
    phase: Option<Phase>,
    finished: bool,
    stats: BotStats,
}

#[derive(Serialize)]
struct LiveReport {
    seed: u64,
    wall_ms: u64,
    batches: Vec<String>,
    bots: Vec<LiveBot>,
    games: Vec<GameOutcome>,
    replay_matches: bool,
}

/// What the summary and pass/fail decision need from either kind of run.
struct Outcome {
    games: Vec<GameOutcome>,
    bots: Vec<(String, bool, BotStats)>,
    problems: Vec<String>,
    elapsed: String,
    journal: String,
    report: serde_json::Value,
}

pub fn run(a: SimulateArgs) -> CliResult {
    let protocol_text = read(&a.protocol)?;
    let protocol = check_protocol(&a.protocol, &protocol_text)?;
    let game_path = a.game.clone().unwrap_or_else(|| sibling(&a.protocol, "game.yaml"));
    let layout = GameLayout::parse(&read(&game_path)?)
        .map_err(|e| CliError::new(e.code(), format!("{}: {e}", game_path.display())))?;
    let script = BotScript::parse(&read(&a.bots)?)
        .map_err(|e| CliError::new("bot-script", format!("{}: {e}", a.bots.display())))?;
    if protocol.batches.is_empty() {
        return Err(CliError::new(
            "scenario-setup",
            format!("{} defines no batches to run", a.protocol.display()),
        ));
    }
    for b in &a.batches {
        if protocol.batch(b).is_none() {
            return Err(CliError::new(
                "scenario-setup",
                format!("batch {b:?} is not defined in {}", a.protocol.display()),
            ));
        }
    }
    if a.heartbeat_interval_s == 0 || a.heartbeat_misses == 0 {
        return Err(CliError::new(
            "bad-argument",
            "heartbeat interval and misses must be at least 1",
        ));
    }
    let heartbeat = HeartbeatConfig {
        interval_ms: a.heartbeat_interval_s * 1000,
        misses_allowed: a.heartbeat_misses,
    };

    let outcome = if a.virtual_clock {
        virtual_run(&a, protocol_text, script, layout, heartbeat)?
    } else {
        live_run(&a, protocol_text, &protocol, script, layout, heartbeat)?
    };

    write(
        &a.report,
        serde_json::to_string_pretty(&outcome.report).expect("report serializes"),
    )?;
    if let Some(j) = &a.journal_out {
        write(j, outcome.journal.clone())?;
    }
    summarize(&a, &outcome);
    let unfinished: Vec<&str> = outcome
        .games
        .iter()
        .filter(|g| g.status != GameStatus::Ended)
        .map(|g| g.id.as_str())
        .collect();
    let stuck_bots = outcome.bots.iter().filter(|b| !b.1).count();
    if !outcome.problems.is_empty() || !unfinished.is_empty() || stuck_bots > 0 || outcome.games.is_empty() {
        let mut msg = format!(
            "simulation failed: {} problem(s), {} game(s) not ended, {stuck_bots} bot(s) unfinished",
            outcome.problems.len(),
            unfinished.len()
        );
        if outcome.games.is_empty() {
            msg.push_str(", no game started");
        }
        let mut e = CliError::new("scenario-failed", msg);
        e.details = outcome.problems.clone();
        e.details.extend(unfinished.iter().map(|g| format!("not ended: {g}")));
        return Err(e);
    }
    println!("PASS");
    Ok(())
}

fn virtual_run(
    a: &SimulateArgs,
    protocol_text: String,
    script: BotScript,
    layout: GameLayout,
    heartbeat: HeartbeatConfig,
) -> CliResult<Outcome> {
    let mut scenario = Scenario::new(protocol_text, script, Arc::new(layout)).seed(a.seed);
    scenario.batches = a.batches.clone();
    scenario.heartbeat = heartbeat;
    scenario.max_virtual_ms = a.timeout_s * 1000;
    let report = scenario.run().map_err(|e| CliError::new(e.code(), e.to_string()))?;
    let problems = report.problems();
    Ok(Outcome {
        games: report.games.clone(),
        bots: report
            .bots
            .iter()
            .map(|b| {
                (
                    b.identifier.clone(),
                    matches!(b.phase, Some(Phase::Exited)) || b.dropped,
                    b.stats.clone(),
                )
            })
            .collect(),
        elapsed: format!(
            "{:.1} s virtual in {} steps",
            report.virtual_ms as f64 / 1000.0,
            report.steps
        ),
        journal: report.journal.clone(),
        report: json!({"clock": "virtual", "passed": problems.is_empty(), "problems": problems, "report": report}),
        problems,
    })
}

fn live_run(
    a: &SimulateArgs,
    protocol_text: String,
    protocol: &vlab_core::treatments::Protocol,
    script: BotScript,
    layout: GameLayout,
    heartbeat: HeartbeatConfig,
) -> CliResult<Outcome> {
    let names: Vec<String> = if a.batches.is_empty() {
        protocol.batches.iter().map(|b| b.name.clone()).collect()
    } else {
        a.batches.clone()
    };
    let config = ServerConfig {
        engine: EngineConfig {
            heartbeat,
            token_seed: Some(a.seed),
            ..EngineConfig::default()
        },
        startup: json!({"simulate": {"seed": a.seed}}),
        ..ServerConfig::default()
    };
    let limit = Duration::from_secs(a.timeout_s);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("runtime", e.to_string()))?;
    rt.block_on(async move {
        let started = Instant::now();
        let server = Server::start(config, Arc::new(layout))
            .await
            .map_err(|e| CliError::new(e.code(), e.to_string()))?;
        let shared = server.shared().clone();
        let batches = shared
            .admin(|e, now| {
                let pid = e.import_protocol(ACTOR, &protocol_text, now)?;
                let mut ids = Vec::new();
                for n in &names {
                    let id = e.create_named_batch(ACTOR, &pid, n, now)?;
                    e.start_batch(ACTOR, &id, now)?;
                    ids.push(id);
                }
                Ok::<_, vlab_core::EngineError>(ids)
            })
            .map_err(|e| CliError::new("scenario-setup", e.to_string()))?;
        let bots = vlab_server::ws_bots::run_ws_bots(&server.play_url(), &script, a.seed, limit).await;
        while started.elapsed() < limit {
            let done = shared.inspect(|e| {
                batches
                    .iter()
                    .all(|b| e.world().batches.get(b).is_some_and(|b| b.status.is_terminal()))
            });
            if done {
                break;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        let (world, journal) = shared.inspect(|e| (e.world().clone(), e.journal_text()));
        server.shutdown().await;
        let journal = journal.map_err(|e| CliError::new("journal", e.to_string()))?;
        let replay_matches = replay_text(&journal, None).is_ok_and(|r| r.halt.is_none() && r.world == world);
        let mut problems = Vec::new();
        if !replay_matches {
            problems.push("replay: journal fold differs from live state".to_string());
        }
        for b in &bots {
            problems.extend(
                b.stats
                    .order_violations
                    .iter()
                    .map(|v| format!("order: {}: {v}", b.identifier)),
            );
        }
        let games = outcomes(&world);
        let wall_ms = started.elapsed().as_millis() as u64;
        let live = LiveReport {
            seed: a.seed,
            wall_ms,
            batches,
            bots: bots
                .iter()
                .map(|b| LiveBot {
                    identifier: b.identifier.clone(),
                    player_id: b.player_id.clone(),
                    phase: b.phase,
                    finished: b.finished,
                    stats: b.stats.clone(),
                })
                .collect(),
            games: games.clone(),
            replay_matches,
        };
        Ok(Outcome {
            games,
            bots: bots
                .iter()
                .map(|b| (b.identifier.clone(), b.finished, b.stats.clone()))
                .collect(),
            elapsed: format!("{:.1} s wall clock", wall_ms as f64 / 1000.0),
            journal,
            report: json!({"clock": "real", "passed": problems.is_empty(), "problems": problems, "report": live}),
            problems,
        })
    })
}

fn outcomes(world: &World) -> Vec<GameOutcome> {
    world
        .games
        .values()
        .map(|g| GameOutcome {
            id: g.id.clone(),
            treatment: g.treatment.name.clone(),
            status: g.status,
            end_reason: g.end_reason.clone(),
            players: g.player_ids.clone(),
            rounds: g.rounds.len(),
        })
        .collect()
}

fn summarize(a: &SimulateArgs, o: &Outcome) {
    println!("simulated {} ({}), seed {}", a.protocol.display(), o.elapsed, a.seed);
    for g in &o.games {
        let status = serde_json::to_value(g.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        println!(
            "  game {:<8} {:<20} {:<10} {} players, {} rounds",
            g.id,
            g.treatment,
            status,
            g.players.len(),
            g.rounds
        );
    }
    let sent: u64 = o.bots.iter().map(|b| b.2.intents_sent).sum();
    let recv: u64 = o.bots.iter().map(|b| b.2.frames_received).sum();
    let done = o.bots.iter().filter(|b| b.1).count();
    println!(
        "  bots: {done}/{} finished, {sent} intents sent, {recv} frames received",
        o.bots.len()
    );
    for (id, _, stats) in &o.bots {
        if !stats.errors.is_empty() {
            println!("  note: {id} received errors: {}", stats.errors.join(", "));
        }
    }
    for p in &o.problems {
        println!("  problem: {p}");
    }
    println!("  report: {}", a.report.display());
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn write(path: &Path, body: String) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}
