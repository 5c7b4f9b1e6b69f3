//! Deterministic in-process scenario runner. Bots and engine exchange real
//! wire frames through a simulated network with per-link FIFO delivery;
//! time is virtual and jumps to the next pending event.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{ConnId, Engine, EngineConfig, EngineError, Outbound};
use crate::journal::{replay_text, Journal};
use crate::lifecycle::{check_hook_trace, Callbacks, HookRecord, Phase};
use crate::model::{ExitReason, GameStatus, ScopeRef, Value};
use crate::state::World;
use crate::sync::{
    can_see, visible_attributes, ChangeBody, HeartbeatConfig, MessageType, SubscribeBody, WelcomeBody, WireMessage,
};
use crate::treatments::parse_protocol;

use super::client::{BotClient, BotOutput, BotStats};
use super::script::BotScript;

/// Everything needed to run one scenario.
#[derive(Clone)]
pub struct Scenario {
    pub protocol_yaml: String,
    pub script: BotScript,
    pub callbacks: Arc<dyn Callbacks>,
    /// Batch names from the protocol to create and start; empty means all.
    pub batches: Vec<String>,
    pub seed: u64,
    pub heartbeat: HeartbeatConfig,
    /// One-way network delay range in ms.
    pub latency_ms: (u64, u64),
    /// Virtual time limit.
    pub max_virtual_ms: u64,
    /// Keep every frame each bot sent and received.
    pub transcripts: bool,
}

impl Scenario {
    pub fn new(protocol_yaml: impl Into<String>, script: BotScript, callbacks: Arc<dyn Callbacks>) -> Self {
        Self {
            protocol_yaml: protocol_yaml.into(),
            script,
            callbacks,
            batches: Vec::new(),
            seed: 0,
            heartbeat: HeartbeatConfig::default(),
            latency_ms: (5, 40),
            max_virtual_ms: 24 * 3600 * 1000,
            transcripts: true,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn batch(mut self, name: impl Into<String>) -> Self {
        self.batches.push(name.into());
        self
    }

    pub fn latency(mut self, min: u64, max: u64) -> Self {
        self.latency_ms = (min, max);
        self
    }

    pub fn run(&self) -> Result<ScenarioReport, ScenarioError> {
        run_scenario(self)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario setup failed: {0}")]
    Setup(String),
    #[error("scenario did not finish by {at_ms} ms virtual; stuck: {}", stuck.join(", "))]
    Timeout { at_ms: u64, stuck: Vec<String> },
    #[error("engine halted: {0}")]
    Halted(String),
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Setup(_) => "scenario-setup",
            ScenarioError::Timeout { .. } => "scenario-timeout",
            ScenarioError::Halted(_) => "halted",
        }
    }
}

impl From<EngineError> for ScenarioError {
    fn from(e: EngineError) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptEntry {
    pub at: u64,
    pub dir: Direction,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BotReport {
    pub identifier: String,
    pub group: String,
    pub index: usize,
    pub player_id: Option<String>,
    /// Session token issued to this bot, for redaction checks.
    pub token: Option<String>,
    pub phase: Option<Phase>,
    pub exit_reason: Option<ExitReason>,
    pub dropped: bool,
    pub stats: BotStats,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameOutcome {
    pub id: String,
    pub treatment: String,
    pub status: GameStatus,
    pub end_reason: Option<String>,
    pub players: Vec<String>,
    pub rounds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub virtual_ms: u64,
    pub steps: u64,
    pub batches: Vec<String>,
    pub bots: Vec<BotReport>,
    pub games: Vec<GameOutcome>,
    /// Deliveries of data the receiving player may not see.
    pub leaks: Vec<String>,
    pub order_violations: Vec<String>,
    /// Connected clients whose view differs from the server's at the end.
    pub convergence_failures: Vec<String>,
    pub hook_violations: Vec<String>,
    /// Folding the journal reproduces the live state exactly.
    pub replay_matches: bool,
    #[serde(skip)]
    pub journal: String,
    #[serde(skip)]
    pub world: World,
}

impl ScenarioReport {
    /// Invariant failures; empty for a clean run.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.leaks.iter().map(|l| format!("leak: {l}")));
        out.extend(self.order_violations.iter().map(|l| format!("order: {l}")));
        out.extend(self.convergence_failures.iter().map(|l| format!("divergence: {l}")));
        out.extend(self.hook_violations.iter().map(|l| format!("hooks: {l}")));
        if !self.replay_matches {
            out.push("replay: journal fold differs from live state".into());
        }
        out
    }

    pub fn hook_trace(&self, game: &str) -> &[HookRecord] {
        self.world.hooks.get(game).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn bot(&self, identifier: &str) -> Option<&BotReport> {
        self.bots.iter().find(|b| b.identifier == identifier)
    }
}

#[derive(Debug, Clone)]
enum Delivery {
    Arrive { bot: usize },
    ToServer { conn: ConnId, text: String },
    ServerDisconnect { conn: ConnId },
    ToBot { bot: usize, conn: ConnId, text: String },
    BotClosed { bot: usize, conn: ConnId },
}

struct Net {
    queue: BTreeMap<(u64, u64), Delivery>,
    seq: u64,
    rng: ChaCha8Rng,
    latency: (u64, u64),
    /// Last delivery time per (conn, to_server) so each direction stays FIFO.
    links: BTreeMap<(ConnId, bool), u64>,
}

impl Net {
    fn push(&mut self, at: u64, d: Delivery) {
        self.seq += 1;
        self.queue.insert((at, self.seq), d);
    }

    fn send(&mut self, now: u64, conn: ConnId, to_server: bool, d: Delivery) {
        let (a, b) = self.latency;
        let lat = if b > a { self.rng.random_range(a..=b) } else { a };
        let last = self.links.entry((conn, to_server)).or_insert(0);
        let at = (now + lat).max(*last);
        *last = at;
        self.push(at, d);
    }
}

struct Run<'a> {
    engine: Engine,
    bots: Vec<BotClient>,
    bot_conn: Vec<Option<ConnId>>,
    conn_bot: BTreeMap<ConnId, usize>,
    net: Net,
    leaks: Vec<String>,
    transcripts: Vec<Vec<TranscriptEntry>>,
    now: u64,
    scenario: &'a Scenario,
}

impl Run<'_> {
    fn note(&mut self, bot: usize, dir: Direction, text: &str) {
        if self.scenario.transcripts {
            self.transcripts[bot].push(TranscriptEntry {
                at: self.now,
                dir,
                text: text.to_string(),
            });
        }
    }

    fn route_engine(&mut self, outs: Vec<Outbound>) {
        for o in outs {
            match o {
                Outbound::Frame { conn, kind, text } => {
                    self.check_leak(conn, kind, &text);
                    if let Some(&bot) = self.conn_bot.get(&conn) {
                        self.net
                            .send(self.now, conn, false, Delivery::ToBot { bot, conn, text });
                    }
                }
                Outbound::Close { conn } => {
                    if let Some(&bot) = self.conn_bot.get(&conn) {
                        self.net.send(self.now, conn, false, Delivery::BotClosed { bot, conn });
                    }
                }
            }
        }
    }

    fn check_leak(&mut self, conn: ConnId, kind: MessageType, text: &str) {
        let Some(player) = self.engine.player_of(conn).map(str::to_string) else {
            return;
        };
        let world = self.engine.world();
        let mut check = |scope: &ScopeRef, key: &str| {
            if !can_see(world, &player, scope, key) {
                self.leaks.push(format!("{player} received {scope}/{key}"));
            }
        };
        let Ok(msg) = WireMessage::decode(text) else { return };
        match kind {
            MessageType::Change => {
                if let Ok(c) = msg.body_as::<ChangeBody>() {
                    check(&c.scope, &c.key);
                }
            }
            MessageType::Subscribe => {
                if let Ok(s) = msg.body_as::<SubscribeBody>() {
                    s.attributes.iter().for_each(|a| check(&a.scope, &a.key));
                }
            }
            MessageType::Welcome => {
                if let Ok(w) = msg.body_as::<WelcomeBody>() {
                    w.attributes.iter().for_each(|a| check(&a.scope, &a.key));
                }
            }
            _ => {}
        }
    }

    fn route_bot(&mut self, bot: usize, outs: Vec<BotOutput>) {
        for o in outs {
            match o {
                BotOutput::Send(text) => {
                    if let Some(conn) = self.bot_conn[bot] {
                        self.note(bot, Direction::Sent, &text);
                        self.net.send(self.now, conn, true, Delivery::ToServer { conn, text });
                    }
                }
                BotOutput::Close => {
                    if let Some(conn) = self.bot_conn[bot].take() {
                        self.net.send(self.now, conn, true, Delivery::ServerDisconnect { conn });
                    }
                }
                BotOutput::Connect => self.connect(bot),
            }
        }
    }

    fn connect(&mut self, bot: usize) {
        let conn = self.engine.connect(self.now);
        self.bot_conn[bot] = Some(conn);
        self.conn_bot.insert(conn, bot);
        let hello = self.bots[bot].on_connected(self.now);
        self.route_bot(bot, hello);
    }

    fn deliver(&mut self, d: Delivery) {
        match d {
            Delivery::Arrive { bot } => self.connect(bot),
            Delivery::ToServer { conn, text } => {
                let outs = self.engine.receive(conn, &text, self.now);
                self.route_engine(outs);
            }
            Delivery::ServerDisconnect { conn } => {
                let outs = self.engine.disconnect(conn, self.now);
                self.route_engine(outs);
            }
            Delivery::ToBot { bot, conn, text } => {
                if self.bot_conn[bot] == Some(conn) {
                    self.note(bot, Direction::Received, &text);
                    let outs = self.bots[bot].on_frame(&text, self.now);
                    self.route_bot(bot, outs);
                }
            }
            Delivery::BotClosed { bot, conn } => {
                if self.bot_conn[bot] == Some(conn) {
                    self.bot_conn[bot] = None;
                    self.bots[bot].on_closed(self.now);
                }
            }
        }
    }

    fn deliver_due(&mut self) {
        while let Some(entry) = self.net.queue.first_entry() {
            if entry.key().0 > self.now {
                break;
            }
            let d = entry.remove();
            self.deliver(d);
        }
    }

    fn poll_bots(&mut self) {
        for b in 0..self.bots.len() {
            if self.bots[b].next_wake().is_some_and(|t| t <= self.now) {
                let outs = self.bots[b].poll(self.now);
                self.route_bot(b, outs);
            }
        }
    }

    fn finished(&self) -> bool {
        self.bots.iter().all(BotClient::finished)
    }

    fn stuck(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .engine
            .world()
            .games
            .values()
            .filter(|g| !g.status.is_terminal())
            .map(|g| format!("game {} ({}, {:?})", g.id, g.status.as_str(), g.cursor))
            .collect();
        out.extend(
            self.bots
                .iter()
                .filter(|b| !b.finished())
                .take(10)
                .map(|b| format!("bot {} in {:?}", b.identifier, b.phase())),
        );
        out
    }
}

/// Runs a scenario to completion on a virtual clock and checks the
/// platform invariants along the way.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioReport, ScenarioError> {
    let protocol = parse_protocol(&s.protocol_yaml).map_err(|e| ScenarioError::Setup(e.to_string()))?;
    let (journal, _mem) = Journal::in_memory();
    let config = EngineConfig {
        heartbeat: s.heartbeat,
        token_seed: Some(s.seed),
        ..EngineConfig::default()
    };
    let mut engine = Engine::new(config, journal, s.callbacks.clone());
    let proto = engine.import_protocol("scenario", &s.protocol_yaml, 0)?;
    let names: Vec<String> = if s.batches.is_empty() {
        protocol.batches.iter().map(|b| b.name.clone()).collect()
    } else {
        s.batches.clone()
    };
    if names.is_empty() {
        return Err(ScenarioError::Setup("protocol defines no batches".into()));
    }
    let mut batches = Vec::new();
    for n in &names {
        let id = engine.create_named_batch("scenario", &proto, n, 0)?;
        engine.start_batch("scenario", &id, 0)?;
        batches.push(id);
    }
    engine.take_outbound();

    let mut bots = Vec::new();
    for g in &s.script.bots {
        let plan = Arc::new(g.clone());
        for i in 0..g.count {
            bots.push(BotClient::new(plan.clone(), i, s.seed));
        }
    }
    let mut net = Net {
        queue: BTreeMap::new(),
        seq: 0,
        rng: ChaCha8Rng::seed_from_u64(s.seed ^ 0x006e_6574_776f_726b),
        latency: s.latency_ms,
        links: BTreeMap::new(),
    };
    for (i, b) in bots.iter_mut().enumerate() {
        let at = b.arrival_ms();
        net.push(at, Delivery::Arrive { bot: i });
    }
    let n = bots.len();
    let mut run = Run {
        engine,
        bots,
        bot_conn: vec![None; n],
        conn_bot: BTreeMap::new(),
        net,
        leaks: Vec::new(),
        transcripts: vec![Vec::new(); n],
        now: 0,
        scenario: s,
    };

    let mut steps = 0u64;
    let mut same_time = 0u32;
    while !run.finished() {
        if let Some(h) = run.engine.halted() {
            return Err(ScenarioError::Halted(h.to_string()));
        }
        let next = [
            run.net.queue.keys().next().map(|k| k.0),
            run.engine.next_deadline(),
            run.bots.iter().filter_map(BotClient::next_wake).min(),
        ]
        .into_iter()
        .flatten()
        .min();
        let Some(t) = next else {
            return Err(ScenarioError::Timeout {
                at_ms: run.now,
                stuck: run.stuck(),
            });
        };
        let t = t.max(run.now);
        if t > run.scenario.max_virtual_ms {
            return Err(ScenarioError::Timeout {
                at_ms: run.now,
                stuck: run.stuck(),
            });
        }
        same_time = if t == run.now { same_time + 1 } else { 0 };
        if same_time > 100_000 {
            return Err(ScenarioError::Timeout {
                at_ms: run.now,
                stuck: run.stuck(),
            });
        }
        run.now = t;
        steps += 1;
        if run.engine.next_deadline().is_some_and(|d| d <= t) {
            let outs = run.engine.tick(t);
            run.route_engine(outs);
        }
        run.deliver_due();
        run.poll_bots();
    }
    // let in-flight frames land so views can be compared
    let mut guard = 0;
    while let Some(&(t, _)) = run.net.queue.keys().next() {
        run.now = run.now.max(t);
        run.deliver_due();
        guard += 1;
        if guard > 1_000_000 {
            break;
        }
    }

    let journal = run
        .engine
        .journal_text()
        .map_err(|e| ScenarioError::Halted(e.to_string()))?;
    let world = run.engine.world().clone();
    let replay_matches = replay_text(&journal, None)
        .map(|r| r.halt.is_none() && r.world == world)
        .unwrap_or(false);

    let mut convergence_failures = Vec::new();
    for (i, b) in run.bots.iter().enumerate() {
        let Some(p) = b.player_id() else { continue };
        if run.bot_conn[i].is_none() || b.stats.superseded {
            continue;
        }
        let server: BTreeMap<(ScopeRef, String), (Value, u64)> = visible_attributes(&world, p)
            .into_iter()
            .map(|a| ((a.scope, a.key), (a.value, a.version)))
            .collect();
        if &server != b.view() {
            let keys: BTreeSet<_> = server.keys().chain(b.view().keys()).collect();
            let diff: Vec<String> = keys
                .into_iter()
                .filter(|k| server.get(*k) != b.view().get(*k))
                .take(3)
                .map(|k| format!("{}/{}", k.0, k.1))
                .collect();
            convergence_failures.push(format!("{} ({p}) differs on {}", b.identifier, diff.join(", ")));
        }
    }

    let mut hook_violations = Vec::new();
    for g in world.games.values().filter(|g| g.status != GameStatus::Pending) {
        let trace = world.hooks.get(&g.id).map(Vec::as_slice).unwrap_or_default();
        if let Err(e) = check_hook_trace(trace, g.status == GameStatus::Cancelled) {
            hook_violations.push(format!("{}: {e}", g.id));
        }
    }

    let order_violations = run
        .bots
        .iter()
        .flat_map(|b| {
            b.stats
                .order_violations
                .iter()
                .map(move |v| format!("{}: {v}", b.identifier))
        })
        .collect();
    let mut transcripts = std::mem::take(&mut run.transcripts);
    let bots = run
        .bots
        .iter()
        .zip(transcripts.iter_mut())
        .map(|(b, transcript)| {
            let p = b.player_id().and_then(|p| world.players.get(p));
            BotReport {
                identifier: b.identifier.clone(),
                group: b.group.clone(),
                index: b.index,
                player_id: b.player_id().map(str::to_string),
                token: b.token().map(str::to_string),
                phase: p.map(|p| p.phase),
                exit_reason: p.and_then(|p| p.exit_reason),
                dropped: p.is_some_and(|p| p.dropped),
                stats: b.stats.clone(),
                transcript: std::mem::take(transcript),
            }
        })
        .collect();
    let games = world
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
        .collect();

    Ok(ScenarioReport {
        seed: s.seed,
        virtual_ms: run.now,
        steps,
        batches,
        bots,
        games,
        leaks: run.leaks,
        order_violations,
        convergence_failures,
        hook_violations,
        replay_matches,
        journal,
        world,
    })
}
