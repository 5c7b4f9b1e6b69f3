//! The experiment engine: one serial executor over the world state, driven
//! by explicit timestamps. Transports feed it frames and ticks and carry
//! away the frames it emits.

mod admin;
mod ctx;
mod game;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

pub use admin::{BatchSummary, GameSummary, LobbySummary};
pub use ctx::GameCtx;
pub(crate) use ctx::Request;

use crate::events::{Event, EventRecord};
use crate::journal::{replay, Journal, JournalError, ParsedJournal};
use crate::lifecycle::{advance_flow, Callbacks, ChangeNotice, FlowEvent, FlowViolation, Phase};
use crate::model::{ChangeOp, Cursor, GameStatus, ModelError, ScopeKind, ScopeRef, Value, SERVER_ACTOR};
use crate::state::World;
use crate::sync::{
    audience, heartbeat_check, new_token, token_hash, visible_attributes, ChangeBody, ChangeIntent, ClientState,
    ErrorBody, GameView, HeartbeatBody, HeartbeatConfig, HelloBody, Liveness, LobbyView, MessageType, SubmitBody,
    SubscribeBody, TransitionBody, WelcomeBody, WireMessage,
};
use crate::treatments::ProtocolError;

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    Frame {
        conn: ConnId,
        kind: MessageType,
        text: String,
    },
    Close {
        conn: ConnId,
    },
}

impl Outbound {
    pub fn conn(&self) -> ConnId {
        match self {
            Outbound::Frame { conn, .. } | Outbound::Close { conn } => *conn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub heartbeat: HeartbeatConfig,
    /// How often lobby members get a status push.
    pub lobby_push_ms: u64,
    /// Seeds session tokens and default batch seeds. `None` draws from the OS.
    pub token_seed: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            heartbeat: HeartbeatConfig::default(),
            lobby_push_ms: 1_000,
            token_seed: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowViolation),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("stale stage: current is {current}, got {got}")]
    StaleStage { current: String, got: String },
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("game {0} is paused")]
    GamePaused(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("bad sequence number {got}, last was {last}")]
    BadSeq { got: u64, last: u64 },
    #[error("superseded by a newer login")]
    SecondLogin,
    #[error("engine halted: {0}")]
    Halted(String),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Model(e) => e.code(),
            EngineError::Flow(_) => "flow-violation",
            EngineError::Protocol(e) => e.code(),
            EngineError::Journal(_) => "storage",
            EngineError::NotFound(_) => "not-found",
            EngineError::Conflict(_) => "conflict",
            EngineError::StaleStage { .. } => "stale-stage",
            EngineError::Forbidden(_) => "forbidden",
            EngineError::GamePaused(_) => "game-paused",
            EngineError::Auth(_) => "auth-failed",
            EngineError::BadRequest(_) => "bad-request",
            EngineError::BadSeq { .. } => "bad-seq",
            EngineError::SecondLogin => "second-login",
            EngineError::Halted(_) => "halted",
        }
    }
}

#[derive(Debug, Clone)]
struct Session {
    conn: Option<ConnId>,
    last_seen: u64,
    liveness: Liveness,
    dead_since: Option<u64>,
    policy_done: bool,
}

impl Session {
    fn fresh(now: u64) -> Self {
        Self {
            conn: None,
            last_seen: now,
            liveness: Liveness::Alive,
            dead_since: None,
            policy_done: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Conn {
    player: Option<String>,
    out_seq: u64,
    in_seq: u64,
    last_ping: u64,
}

#[derive(Debug, Clone)]
struct PendingWelcome {
    conn: ConnId,
    resumed: bool,
    token: Option<String>,
}

/// Sans-IO engine. Every public method takes the current time in
/// milliseconds; nothing inside reads a clock.
pub struct Engine {
    pub(crate) world: World,
    journal: Journal,
    callbacks: Arc<dyn Callbacks>,
    config: EngineConfig,
    pub(crate) now: u64,
    rng: ChaCha20Rng,
    sessions: BTreeMap<String, Session>,
    conns: BTreeMap<ConnId, Conn>,
    next_conn: ConnId,
    outbox: Vec<Outbound>,
    changes: Vec<crate::model::AttrChange>,
    dirty: BTreeMap<String, String>,
    resync: BTreeSet<String>,
    welcomes: BTreeMap<String, PendingWelcome>,
    deferred: Vec<(String, Request)>,
    halted: Option<String>,
    last_lobby_push: u64,
    feed: Option<Vec<EventRecord>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("now", &self.now)
            .field("offset", &self.journal.next_offset())
            .field("halted", &self.halted)
            .finish()
    }
}

impl Engine {
    pub fn new(config: EngineConfig, journal: Journal, callbacks: Arc<dyn Callbacks>) -> Self {
        Self::from_world(config, journal, callbacks, World::new(), 0)
    }

    /// Rebuilds the engine from the records already in its journal. Players
    /// who were mid-experiment get a fresh heartbeat window starting at `now`.
    pub fn restore(
        config: EngineConfig,
        journal: Journal,
        parsed: &ParsedJournal,
        callbacks: Arc<dyn Callbacks>,
        now: u64,
    ) -> Result<Self, EngineError> {
        let replayed = replay(&parsed.records, None);
        if let Some(h) = replayed.halt {
            return Err(EngineError::Journal(JournalError::Corrupt {
                line: h.line,
                message: h.message,
            }));
        }
        let mut engine = Self::from_world(config, journal, callbacks, replayed.world, now);
        let live: Vec<String> = engine
            .world
            .players
            .values()
            .filter(|p| !p.retired && matches!(p.phase, Phase::Lobby | Phase::Game) && !p.dropped)
            .map(|p| p.id.clone())
            .collect();
        for p in live {
            engine.sessions.insert(p, Session::fresh(now));
        }
        Ok(engine)
    }

    fn from_world(
        config: EngineConfig,
        journal: Journal,
        callbacks: Arc<dyn Callbacks>,
        world: World,
        now: u64,
    ) -> Self {
        let rng = match config.token_seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_os_rng(),
        };
        Self {
            world,
            journal,
            callbacks,
            config,
            now,
            rng,
            sessions: BTreeMap::new(),
            conns: BTreeMap::new(),
            next_conn: 1,
            outbox: Vec::new(),
            changes: Vec::new(),
            dirty: BTreeMap::new(),
            resync: BTreeSet::new(),
            welcomes: BTreeMap::new(),
            deferred: Vec::new(),
            halted: None,
            last_lobby_push: now,
            feed: None,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn journal_offset(&self) -> u64 {
        self.journal.next_offset()
    }

    pub fn journal_text(&self) -> Result<String, JournalError> {
        self.journal.text()
    }

    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    /// Starts collecting committed records for an admin event stream.
    pub fn enable_feed(&mut self) {
        self.feed.get_or_insert_with(Vec::new);
    }

    pub fn take_feed(&mut self) -> Vec<EventRecord> {
        self.feed.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn take_outbound(&mut self) -> Vec<Outbound> {
        std::mem::take(&mut self.outbox)
    }

    /// Records the effective configuration at startup.
    pub fn startup(&mut self, config: Value, now: u64) -> Result<(), EngineError> {
        self.now = now;
        self.commit(Event::Startup {
            actor: SERVER_ACTOR.into(),
            config,
        })
    }

    pub(crate) fn random_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Write-ahead: the record is durable before state changes. A storage
    /// failure stops the engine.
    pub(crate) fn commit(&mut self, event: Event) -> Result<(), EngineError> {
        if let Some(h) = &self.halted {
            return Err(EngineError::Halted(h.clone()));
        }
        let rec = match self.journal.record(self.now, &event) {
            Ok(r) => r,
            Err(e) => {
                tracing::error!(error = %e, "journal write failed; halting");
                self.halted = Some(e.to_string());
                return Err(EngineError::Halted(e.to_string()));
            }
        };
        if let Err(e) = self.world.apply(&event, self.now) {
            tracing::error!(error = %e, "state fold failed; halting");
            self.halted = Some(e.to_string());
            return Err(EngineError::Halted(e.to_string()));
        }
        self.note_effects(&event);
        if let Some(feed) = self.feed.as_mut() {
            feed.push(rec);
        }
        Ok(())
    }

    fn mark_game(&mut self, game: &str, reason: &str) {
        if let Some(g) = self.world.games.get(game) {
            let members: Vec<String> = g.player_ids.iter().chain(g.lobby.members.iter()).cloned().collect();
            for p in members {
                self.dirty.insert(p, reason.to_string());
            }
        }
    }

    fn note_effects(&mut self, event: &Event) {
        use Event::*;
        match event {
            Set { .. } | Append { .. } => self.changes.push(event.as_change().expect("attribute event")),
            Publish { game, .. } => {
                if let Some(g) = self.world.games.get(game) {
                    self.resync.extend(g.player_ids.iter().cloned());
                }
            }
            PlayerPhase { player, to, .. } => {
                self.dirty.insert(player.clone(), format!("phase_{}", to.as_str()));
            }
            IntroStep { player, .. } => {
                self.dirty.insert(player.clone(), "intro_step".into());
            }
            GameStarted { game, players } => {
                self.resync.extend(players.iter().cloned());
                self.mark_game(game, "game_started");
            }
            StageStarted { game, .. } => self.mark_game(game, "stage_started"),
            StageEnded { game, .. } => self.mark_game(game, "stage_ended"),
            GameEnded { game } => self.mark_game(game, "game_ended"),
            GameCancelled { game, .. } => self.mark_game(game, "game_cancelled"),
            GamePaused { game, .. } => self.mark_game(game, "game_paused"),
            GameResumed { game, .. } => self.mark_game(game, "game_resumed"),
            RosterRemoved { game, .. } => self.mark_game(game, "roster_changed"),
            LobbyJoined { game, .. } | LobbyLeft { game, .. } | LobbyExtended { game } => {
                self.mark_game(game, "lobby_status")
            }
            Waitlisted { player } => {
                self.dirty.insert(player.clone(), "waitlisted".into());
            }
            _ => {}
        }
    }

    // ---- client-facing state ------------------------------------------

    /// The state a client renders: phase, game position, lobby status.
    pub fn client_state(&self, player: &str) -> Option<ClientState> {
        let p = self.world.players.get(player)?;
        let game = p.current_game.as_ref().and_then(|g| self.world.games.get(g));
        let mut state = ClientState {
            phase: p.phase,
            intro_step: p.intro_step,
            dropped: p.dropped,
            exit_reason: p.exit_reason,
            game: None,
            lobby: None,
        };
        if let Some(g) = game {
            if g.status == GameStatus::Pending {
                state.lobby = Some(LobbyView {
                    game: g.id.clone(),
                    status: g.lobby.status(g.player_count(), self.now),
                });
            } else if g.is_member(player) {
                let stage = g.current_stage();
                let (round_id, stage_id) = match g.cursor {
                    Cursor::At { round, .. } => (Some(g.rounds[round].id.clone()), stage.map(|s| s.id.clone())),
                    _ => (None, None),
                };
                let remaining_ms = match (&g.paused, stage) {
                    (Some(p), _) => p.remaining_ms,
                    (None, Some(s)) => s.deadline.map(|d| d.saturating_sub(self.now)),
                    _ => None,
                };
                state.game = Some(GameView {
                    id: g.id.clone(),
                    status: g.status,
                    cursor: g.cursor,
                    round_id,
                    stage_id,
                    stage_name: stage.map(|s| s.name.clone()),
                    remaining_ms,
                    rounds: g.rounds.len(),
                    roster: g.active.iter().cloned().collect(),
                    treatment: g.treatment.assignments.clone(),
                });
            }
        }
        Some(state)
    }

    fn send(&mut self, conn: ConnId, kind: MessageType, body: impl Serialize) {
        let Some(c) = self.conns.get_mut(&conn) else {
            return;
        };
        c.out_seq += 1;
        let text = WireMessage::new(kind, c.out_seq, body).encode();
        self.outbox.push(Outbound::Frame { conn, kind, text });
    }

    fn send_error(&mut self, conn: ConnId, err: &EngineError, ref_seq: Option<u64>) {
        self.send(
            conn,
            MessageType::Error,
            ErrorBody {
                code: err.code().to_string(),
                message: err.to_string(),
                ref_seq,
            },
        );
    }

    fn live_conn(&self, player: &str) -> Option<ConnId> {
        self.sessions.get(player).and_then(|s| s.conn)
    }

    /// Turns the effects of the current command into frames.
    fn flush(&mut self) {
        let changes = std::mem::take(&mut self.changes);
        let resync = std::mem::take(&mut self.resync);
        let dirty = std::mem::take(&mut self.dirty);
        let welcomes = std::mem::take(&mut self.welcomes);

        for (player, w) in &welcomes {
            let Some(state) = self.client_state(player) else {
                continue;
            };
            let attributes = visible_attributes(&self.world, player);
            self.send(
                w.conn,
                MessageType::Welcome,
                WelcomeBody {
                    player_id: player.clone(),
                    token: w.token.clone(),
                    resumed: w.resumed,
                    state,
                    attributes,
                },
            );
        }
        for change in &changes {
            let body = ChangeBody {
                scope: change.scope.clone(),
                key: change.key.clone(),
                op: change.op,
                value: change.value.clone(),
                version: change.version,
            };
            for p in audience(&self.world, &change.scope, &change.key) {
                if resync.contains(&p) || welcomes.contains_key(&p) {
                    continue;
                }
                if let Some(conn) = self.live_conn(&p) {
                    self.send(conn, MessageType::Change, &body);
                }
            }
        }
        for p in &resync {
            if welcomes.contains_key(p) {
                continue;
            }
            if let Some(conn) = self.live_conn(p) {
                let attributes = visible_attributes(&self.world, p);
                self.send(conn, MessageType::Subscribe, SubscribeBody { attributes });
            }
        }
        for (p, reason) in dirty {
            if welcomes.contains_key(&p) {
                continue;
            }
            let (Some(conn), Some(state)) = (self.live_conn(&p), self.client_state(&p)) else {
                continue;
            };
            self.send(conn, MessageType::Transition, TransitionBody { reason, state });
        }
    }

    /// Runs follow-up requests from hooks, then emits frames.
    fn settle(&mut self) {
        let mut guard = 0;
        while !self.deferred.is_empty() && guard < 10_000 {
            guard += 1;
            let (game, req) = self.deferred.remove(0);
            self.run_request(&game, req);
        }
        self.flush();
    }

    // ---- connections ----------------------------------------------------

    pub fn connect(&mut self, now: u64) -> ConnId {
        self.now = now;
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(
            id,
            Conn {
                player: None,
                out_seq: 0,
                in_seq: 0,
                last_ping: now,
            },
        );
        id
    }

    /// The transport lost the socket. Liveness is still judged by silence.
    pub fn disconnect(&mut self, conn: ConnId, now: u64) -> Vec<Outbound> {
        self.now = now;
        if let Some(c) = self.conns.remove(&conn) {
            if let Some(p) = c.player {
                if let Some(s) = self.sessions.get_mut(&p) {
                    if s.conn == Some(conn) {
                        s.conn = None;
                        let _ = self.commit(Event::Disconnected { player: p });
                    }
                }
            }
        }
        self.settle();
        self.take_outbound()
    }

    pub fn player_of(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn).and_then(|c| c.player.as_deref())
    }

    pub fn receive(&mut self, conn: ConnId, text: &str, now: u64) -> Vec<Outbound> {
        self.now = now;
        if !self.conns.contains_key(&conn) {
            return Vec::new();
        }
        let msg = match WireMessage::decode(text) {
            Ok(m) => m,
            Err(e) => {
                self.send_error(conn, &EngineError::BadRequest(e.to_string()), None);
                return self.take_outbound();
            }
        };
        let seq = msg.seq;
        let result = self.handle(conn, msg);
        if let Err(e) = result {
            self.send_error(conn, &e, Some(seq));
        }
        self.settle();
        self.take_outbound()
    }

    fn handle(&mut self, conn: ConnId, msg: WireMessage) -> Result<(), EngineError> {
        if let Some(h) = &self.halted {
            return Err(EngineError::Halted(h.clone()));
        }
        let c = self.conns.get_mut(&conn).expect("checked by caller");
        if msg.seq <= c.in_seq {
            return Err(EngineError::BadSeq {
                got: msg.seq,
                last: c.in_seq,
            });
        }
        c.in_seq = msg.seq;
        let player = c.player.clone();
        if let Some(p) = &player {
            self.seen(p)?;
        }
        match (msg.kind, player) {
            (MessageType::Hello, None) => {
                let body: HelloBody = msg.body_as().map_err(|e| EngineError::BadRequest(e.to_string()))?;
                self.hello(conn, body)
            }
            (MessageType::Hello, Some(_)) => Err(EngineError::BadRequest("already authenticated".into())),
            (_, None) => Err(EngineError::Auth("send hello first".into())),
            (MessageType::Heartbeat, Some(_)) => {
                self.send(conn, MessageType::HeartbeatAck, HeartbeatBody { at: self.now });
                Ok(())
            }
            (MessageType::HeartbeatAck, Some(_)) => Ok(()),
            (MessageType::Subscribe, Some(p)) => {
                let attributes = visible_attributes(&self.world, &p);
                self.send(conn, MessageType::Subscribe, SubscribeBody { attributes });
                Ok(())
            }
            (MessageType::Change, Some(p)) => {
                let intent: ChangeIntent = msg.body_as().map_err(|e| EngineError::BadRequest(e.to_string()))?;
                self.client_write(&p, intent)
            }
            (MessageType::Submit, Some(p)) => {
                let body: SubmitBody = msg.body_as().map_err(|e| EngineError::BadRequest(e.to_string()))?;
                self.client_submit(&p, body)
            }
            (kind, Some(_)) => Err(EngineError::BadRequest(format!("clients may not send {kind:?}"))),
        }
    }

    /// Any inbound frame proves the session is alive.
    fn seen(&mut self, player: &str) -> Result<(), EngineError> {
        let now = self.now;
        let Some(s) = self.sessions.get_mut(player) else {
            return Ok(());
        };
        s.last_seen = now;
        let was = s.liveness;
        s.liveness = Liveness::Alive;
        s.dead_since = None;
        s.policy_done = false;
        if was != Liveness::Alive {
            self.commit(Event::Liveness {
                player: player.to_string(),
                state: Liveness::Alive,
            })?;
            self.maybe_resume(player)?;
        }
        Ok(())
    }

    fn hello(&mut self, conn: ConnId, body: HelloBody) -> Result<(), EngineError> {
        if let Some(token) = body.token {
            let player = self
                .world
                .tokens
                .get(&token_hash(&token))
                .cloned()
                .ok_or_else(|| EngineError::Auth("unknown session token".into()))?;
            return self.bind(conn, &player, true, None);
        }
        let identifier = body
            .identifier
            .filter(|i| !i.trim().is_empty())
            .ok_or_else(|| EngineError::BadRequest("hello needs a token or an identifier".into()))?;
        let token = new_token(&mut self.rng);
        let hash = token_hash(&token);
        if let Some(player) = self.world.identifiers.get(&identifier).cloned() {
            self.commit(Event::TokenRotated {
                player: player.clone(),
                token_hash: hash,
            })?;
            self.bind(conn, &player, true, Some(token))
        } else {
            let player = self.world.next_player_id();
            self.commit(Event::PlayerCreated {
                player: player.clone(),
                identifier,
                token_hash: hash,
            })?;
            self.bind(conn, &player, false, Some(token))
        }
    }

    fn bind(&mut self, conn: ConnId, player: &str, resumed: bool, token: Option<String>) -> Result<(), EngineError> {
        let now = self.now;
        let old = self.sessions.get(player).and_then(|s| s.conn).filter(|c| *c != conn);
        if let Some(old) = old {
            self.send_error(old, &EngineError::SecondLogin, None);
            self.outbox.push(Outbound::Close { conn: old });
            self.conns.remove(&old);
            self.commit(Event::Superseded {
                player: player.to_string(),
            })?;
        }
        let was_alive = self
            .sessions
            .get(player)
            .map(|s| s.liveness == Liveness::Alive)
            .unwrap_or(true);
        let s = self
            .sessions
            .entry(player.to_string())
            .or_insert_with(|| Session::fresh(now));
        s.conn = Some(conn);
        s.last_seen = now;
        s.liveness = Liveness::Alive;
        s.dead_since = None;
        s.policy_done = false;
        if let Some(c) = self.conns.get_mut(&conn) {
            c.player = Some(player.to_string());
            c.last_ping = now;
        }
        self.commit(Event::Connected {
            player: player.to_string(),
            resumed,
        })?;
        if !was_alive {
            self.commit(Event::Liveness {
                player: player.to_string(),
                state: Liveness::Alive,
            })?;
        }
        self.maybe_resume(player)?;
        self.welcomes
            .insert(player.to_string(), PendingWelcome { conn, resumed, token });
        Ok(())
    }

    // ---- client commands --------------------------------------------------

    /// Scopes a client may write: its own player and composite scopes, and
    /// the game, round and stage scopes of a game it is a member of.
    fn may_write(&self, player: &str, scope: &ScopeRef) -> bool {
        match scope.kind {
            ScopeKind::Player => scope.id == player,
            ScopeKind::PlayerRound | ScopeKind::PlayerStage => scope.player.as_deref() == Some(player),
            ScopeKind::Game | ScopeKind::Round | ScopeKind::Stage => {
                self.world.scope_game(scope).is_some_and(|g| g.is_member(player))
            }
        }
    }

    fn client_write(&mut self, player: &str, intent: ChangeIntent) -> Result<(), EngineError> {
        if !self.may_write(player, &intent.scope) {
            self.world.resolve_scope(&intent.scope)?;
            return Err(EngineError::Forbidden(format!(
                "{player} may not write {}",
                intent.scope
            )));
        }
        let change = match intent.op {
            ChangeOp::Set => self.world.plan_set(&intent.scope, &intent.key, intent.value, player)?,
            ChangeOp::Append => self
                .world
                .plan_append(&intent.scope, &intent.key, intent.value, player)?,
        };
        self.commit(Event::from_change(&change))?;
        let game = self
            .world
            .scope_game(&change.scope)
            .filter(|g| g.is_live())
            .map(|g| g.id.clone());
        if let Some(game) = game {
            let attr = self.world.store.get(&change.scope, &change.key).expect("just written");
            let notice = ChangeNotice {
                scope: change.scope.clone(),
                key: change.key.clone(),
                value: attr.value.clone(),
                version: attr.version,
                actor: player.to_string(),
            };
            let cbs = self.callbacks.clone();
            self.run_callback(&game, crate::lifecycle::HookKind::Change, |ctx| {
                cbs.on_change(ctx, &notice)
            })?;
        }
        Ok(())
    }

    fn client_submit(&mut self, player: &str, body: SubmitBody) -> Result<(), EngineError> {
        if let Some(event) = body.flow {
            let phase = self.world.player(player)?.phase;
            if !event.client_may_send() {
                return Err(FlowViolation { phase, event }.into());
            }
            self.flow(player, event)?;
        }
        if let Some(step) = body.intro_step {
            let phase = self.world.player(player)?.phase;
            if phase != Phase::Intro {
                return Err(EngineError::BadRequest(format!(
                    "intro step sent in phase {}",
                    phase.as_str()
                )));
            }
            self.commit(Event::IntroStep {
                player: player.to_string(),
                step,
            })?;
        }
        if let Some(stage) = body.stage {
            let game = self
                .world
                .player(player)?
                .current_game
                .clone()
                .ok_or_else(|| EngineError::BadRequest(format!("{player} is not in a game")))?;
            self.submit(&game, player, &stage)?;
        }
        Ok(())
    }

    /// Advances a player's flow by one client-sent step.
    pub(crate) fn flow(&mut self, player: &str, event: FlowEvent) -> Result<(), EngineError> {
        let p = self.world.player(player)?;
        if p.retired {
            return Err(EngineError::Forbidden(format!("{player} is retired")));
        }
        let from = p.phase;
        let to = advance_flow(from, event)?;
        self.commit(Event::PlayerPhase {
            player: player.to_string(),
            from,
            to,
            event: Some(event),
            reason: None,
        })?;
        if to == Phase::Lobby {
            self.seat(player)?;
        }
        Ok(())
    }

    // ---- data operations for embedding code -----------------------------------

    pub(crate) fn write(
        &mut self,
        scope: &ScopeRef,
        key: &str,
        value: Value,
        actor: &str,
        append: bool,
    ) -> Result<u64, EngineError> {
        let change = if append {
            self.world.plan_append(scope, key, value, actor)?
        } else {
            self.world.plan_set(scope, key, value, actor)?
        };
        let version = change.version;
        self.commit(Event::from_change(&change))?;
        Ok(version)
    }

    /// Server-side write outside any hook. Propagates like any change.
    pub fn set(
        &mut self,
        scope: &ScopeRef,
        key: &str,
        value: Value,
        actor: &str,
        now: u64,
    ) -> Result<u64, EngineError> {
        self.now = now;
        let r = self.write(scope, key, value, actor, false);
        self.settle();
        r
    }

    pub fn append(
        &mut self,
        scope: &ScopeRef,
        key: &str,
        element: Value,
        actor: &str,
        now: u64,
    ) -> Result<u64, EngineError> {
        self.now = now;
        let r = self.write(scope, key, element, actor, true);
        self.settle();
        r
    }

    /// Journal-only event record; never sent to clients.
    pub fn log(
        &mut self,
        scope: &ScopeRef,
        name: &str,
        payload: Value,
        actor: &str,
        now: u64,
    ) -> Result<(), EngineError> {
        self.now = now;
        let e = self.world.plan_log(scope, name, payload, actor)?;
        self.commit(e)
    }

    pub fn get(&self, scope: &ScopeRef, key: &str) -> Result<Option<&Value>, EngineError> {
        Ok(self.world.get(scope, key)?)
    }

    // ---- time -------------------------------------------------------------

    /// Fires everything due at `now`: stage timers, lobby timeouts,
    /// heartbeats, liveness transitions and disconnect policies.
    pub fn tick(&mut self, now: u64) -> Vec<Outbound> {
        self.now = now.max(self.now);
        if self.halted.is_some() {
            return self.take_outbound();
        }
        let due_stages: Vec<String> = self
            .world
            .games
            .values()
            .filter(|g| g.status == GameStatus::Running)
            .filter(|g| {
                g.current_stage()
                    .and_then(|s| s.deadline)
                    .is_some_and(|d| d <= self.now)
            })
            .map(|g| g.id.clone())
            .collect();
        for g in due_stages {
            let _ = self.end_stage(&g, crate::model::StageEndReason::Timer);
            self.drain_deferred();
        }

        let lobbies: Vec<String> = self
            .world
            .games
            .values()
            .filter(|g| g.status == GameStatus::Pending && !g.lobby.members.is_empty())
            .map(|g| g.id.clone())
            .collect();
        for g in lobbies {
            let _ = self.process_lobby(&g);
            self.drain_deferred();
        }

        let interval = self.ping_every();
        let pings: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.player.is_some() && self.now >= c.last_ping + interval)
            .map(|(id, _)| *id)
            .collect();
        for id in pings {
            if let Some(c) = self.conns.get_mut(&id) {
                c.last_ping = self.now;
            }
            self.send(id, MessageType::Heartbeat, HeartbeatBody { at: self.now });
        }

        self.check_liveness();

        if self.now >= self.last_lobby_push + self.config.lobby_push_ms {
            self.last_lobby_push = self.now;
            let waiting: Vec<String> = self
                .world
                .games
                .values()
                .filter(|g| g.status == GameStatus::Pending)
                .flat_map(|g| g.lobby.members.iter().cloned())
                .collect();
            for p in waiting {
                self.dirty.entry(p).or_insert_with(|| "lobby_status".into());
            }
        }
        self.settle();
        self.take_outbound()
    }

    fn drain_deferred(&mut self) {
        while !self.deferred.is_empty() {
            let (game, req) = self.deferred.remove(0);
            self.run_request(&game, req);
        }
    }

    fn check_liveness(&mut self) {
        let hb = self.config.heartbeat;
        let players: Vec<String> = self.sessions.keys().cloned().collect();
        for p in players {
            let Some(player) = self.world.players.get(&p) else {
                continue;
            };
            if player.retired || matches!(player.phase, Phase::Outro | Phase::Exited) {
                continue;
            }
            let s = &self.sessions[&p];
            let now_state = heartbeat_check(s.last_seen, self.now, hb.interval_ms, hb.misses_allowed);
            if now_state != s.liveness {
                let s = self.sessions.get_mut(&p).expect("present");
                s.liveness = now_state;
                if now_state == Liveness::Dead {
                    s.dead_since = Some(self.now);
                }
                let _ = self.commit(Event::Liveness {
                    player: p.clone(),
                    state: now_state,
                });
            }
            let s = &self.sessions[&p];
            if s.liveness == Liveness::Dead && !s.policy_done {
                let grace = self.grace_for(&p);
                if self.now >= s.dead_since.unwrap_or(self.now) + grace {
                    self.sessions.get_mut(&p).expect("present").policy_done = true;
                    let _ = self.on_dead(&p);
                    self.drain_deferred();
                }
            }
        }
    }

    /// Pings go out twice per interval so a prompt ack always lands before
    /// a full interval of silence.
    fn ping_every(&self) -> u64 {
        (self.config.heartbeat.interval_ms / 2).max(1)
    }

    fn grace_for(&self, player: &str) -> u64 {
        let game = self
            .world
            .players
            .get(player)
            .and_then(|p| p.current_game.as_ref())
            .and_then(|g| self.world.games.get(g));
        match game {
            Some(g) if g.is_live() => self.callbacks.disconnect_policy(&g.treatment).grace_ms(),
            _ => u64::from(crate::lifecycle::DEFAULT_GRACE_S) * 1000,
        }
    }

    /// The earliest time at which `tick` has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        let hb = self.config.heartbeat;
        let mut best: Option<u64> = None;
        let mut consider = |t: u64| best = Some(best.map_or(t, |b| b.min(t)));
        let mut any_lobby = false;
        for g in self.world.games.values() {
            match g.status {
                GameStatus::Running => {
                    if let Some(d) = g.current_stage().and_then(|s| s.deadline) {
                        consider(d);
                    }
                }
                GameStatus::Pending if !g.lobby.members.is_empty() => {
                    any_lobby = true;
                    if let Some(d) = g.lobby.deadline {
                        consider(d);
                    }
                }
                _ => {}
            }
        }
        if any_lobby {
            consider(self.last_lobby_push + self.config.lobby_push_ms);
        }
        for c in self.conns.values() {
            if c.player.is_some() {
                consider(c.last_ping + self.ping_every());
            }
        }
        for (p, s) in &self.sessions {
            let Some(player) = self.world.players.get(p) else {
                continue;
            };
            if player.retired || matches!(player.phase, Phase::Outro | Phase::Exited) {
                continue;
            }
            match s.liveness {
                Liveness::Alive => consider(s.last_seen + hb.interval_ms),
                Liveness::Stale => consider(s.last_seen + hb.interval_ms * u64::from(hb.misses_allowed.max(1))),
                Liveness::Dead if !s.policy_done => consider(s.dead_since.unwrap_or(self.now) + self.grace_for(p)),
                Liveness::Dead => {}
            }
        }
        best.map(|t| t.max(self.now))
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn liveness(&self, player: &str) -> Option<Liveness> {
        self.sessions.get(player).map(|s| s.liveness)
    }
}

#[cfg(test)]
mod tests;
