//! Sans-IO scripted participant. Speaks the same JSON frames as a browser
//! client; transports deliver frames in and carry frames out.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::lifecycle::{FlowEvent, Phase};
use crate::model::{round_id, ChangeOp, Cursor, GameStatus, ScopeKind, ScopeRef, Value};
use crate::sync::{
    ChangeBody, ChangeIntent, ClientState, ErrorBody, HeartbeatBody, HelloBody, MessageType, SubmitBody, SubscribeBody,
    TransitionBody, WelcomeBody, WireMessage,
};

use super::script::{Action, BotGroup, FuzzAction, WriteAction};

/// What a bot wants its transport to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BotOutput {
    Send(String),
    /// Close the current connection.
    Close,
    /// Open a new connection and call `on_connected`.
    Connect,
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Flow(FlowEvent),
    Intro(u32),
    Act { stage: String, idx: usize, action: Action },
    Write { stage: String, intent: ChangeIntent },
    Connect,
}

/// Client-side record of what the bot observed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BotStats {
    pub frames_received: u64,
    pub changes_received: u64,
    pub intents_sent: u64,
    pub submits_sent: u64,
    pub resumes: u32,
    /// Writes that came due while disconnected and were discarded.
    pub dropped_writes: u64,
    /// Error codes received, in order.
    pub errors: Vec<String>,
    /// Deliveries whose version did not strictly increase for their key.
    pub order_violations: Vec<String>,
    pub superseded: bool,
}

pub struct BotClient {
    pub group: String,
    pub index: usize,
    pub identifier: String,
    plan: Arc<BotGroup>,
    rng: ChaCha8Rng,
    token: Option<String>,
    player: Option<String>,
    connected: bool,
    out_seq: u64,
    view: BTreeMap<(ScopeRef, String), (Value, u64)>,
    state: Option<ClientState>,
    queue: VecDeque<(u64, Step)>,
    silent_until: u64,
    flow_sent: Option<Phase>,
    acted_stage: Option<String>,
    /// Index of the next unexecuted action for `acted_stage`.
    progress: usize,
    resuming: bool,
    /// Writes dropped since the last welcome.
    unsent: u64,
    gone: bool,
    pub stats: BotStats,
}

impl std::fmt::Debug for BotClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BotClient")
            .field("identifier", &self.identifier)
            .field("player", &self.player)
            .field("phase", &self.phase())
            .finish()
    }
}

pub fn bot_identifier(group: &str, index: usize) -> String {
    format!("worker-{group}-{index:04}")
}

impl BotClient {
    pub fn new(plan: Arc<BotGroup>, index: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ plan.seed.rotate_left(17));
        rng.set_stream(index as u64 + 1);
        Self {
            group: plan.name.clone(),
            index,
            identifier: bot_identifier(&plan.name, index),
            plan,
            rng,
            token: None,
            player: None,
            connected: false,
            out_seq: 0,
            view: BTreeMap::new(),
            state: None,
            queue: VecDeque::new(),
            silent_until: 0,
            flow_sent: None,
            acted_stage: None,
            progress: 0,
            resuming: false,
            unsent: 0,
            gone: false,
            stats: BotStats::default(),
        }
    }

    /// When this bot should first connect.
    pub fn arrival_ms(&mut self) -> u64 {
        match self.plan.arrive_within_ms {
            0 => 0,
            n => self.rng.random_range(0..=n),
        }
    }

    pub fn player_id(&self) -> Option<&str> {
        self.player.as_deref()
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn state(&self) -> Option<&ClientState> {
        self.state.as_ref()
    }

    pub fn phase(&self) -> Option<Phase> {
        self.state.as_ref().map(|s| s.phase)
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Materialized view: (scope, key) → (value, version).
    pub fn view(&self) -> &BTreeMap<(ScopeRef, String), (Value, u64)> {
        &self.view
    }

    /// Nothing more will happen for this bot: it finished, was dropped, or
    /// left for good.
    pub fn finished(&self) -> bool {
        if self.gone || self.stats.superseded {
            return true;
        }
        match &self.state {
            Some(s) => s.phase == Phase::Exited || s.dropped || (s.phase == Phase::Outro && !self.plan.survey),
            None => false,
        }
    }

    pub fn next_wake(&self) -> Option<u64> {
        if self.gone {
            return None;
        }
        self.queue
            .iter()
            .map(|(t, _)| *t)
            .min()
            .map(|t| t.max(self.silent_until))
    }

    fn frame(&mut self, kind: MessageType, body: impl Serialize) -> BotOutput {
        self.out_seq += 1;
        BotOutput::Send(WireMessage::new(kind, self.out_seq, body).encode())
    }

    fn think(&mut self) -> u64 {
        let (a, b) = self.plan.think_ms;
        if b > a {
            self.rng.random_range(a..=b)
        } else {
            a
        }
    }

    /// A transport connection is open; returns the hello frame.
    pub fn on_connected(&mut self, _now: u64) -> Vec<BotOutput> {
        self.connected = true;
        self.out_seq = 0;
        let hello = match &self.token {
            Some(t) => HelloBody {
                token: Some(t.clone()),
                identifier: None,
            },
            None => HelloBody {
                token: None,
                identifier: Some(self.identifier.clone()),
            },
        };
        vec![self.frame(MessageType::Hello, hello)]
    }

    /// The server closed the connection.
    pub fn on_closed(&mut self, _now: u64) {
        self.connected = false;
    }

    pub fn on_frame(&mut self, text: &str, now: u64) -> Vec<BotOutput> {
        self.stats.frames_received += 1;
        let Ok(msg) = WireMessage::decode(text) else {
            self.stats.errors.push("undecodable".into());
            return Vec::new();
        };
        let mut out = Vec::new();
        match msg.kind {
            MessageType::Welcome => {
                if let Ok(w) = msg.body_as::<WelcomeBody>() {
                    if w.resumed {
                        self.stats.resumes += 1;
                        self.resuming = true;
                    }
                    if self.unsent > 0 {
                        self.stats.errors.push(format!("intents-dropped:{}", self.unsent));
                        self.unsent = 0;
                    }
                    self.player = Some(w.player_id);
                    if let Some(t) = w.token {
                        self.token = Some(t);
                    }
                    self.view = w
                        .attributes
                        .into_iter()
                        .map(|a| ((a.scope, a.key), (a.value, a.version)))
                        .collect();
                    self.state = Some(w.state);
                    self.react(now);
                }
            }
            MessageType::Subscribe => {
                if let Ok(s) = msg.body_as::<SubscribeBody>() {
                    self.view = s
                        .attributes
                        .into_iter()
                        .map(|a| ((a.scope, a.key), (a.value, a.version)))
                        .collect();
                }
            }
            MessageType::Change => {
                if let Ok(c) = msg.body_as::<ChangeBody>() {
                    self.apply_change(c);
                }
            }
            MessageType::Transition => {
                if let Ok(t) = msg.body_as::<TransitionBody>() {
                    self.state = Some(t.state);
                    self.react(now);
                }
            }
            MessageType::Heartbeat => {
                if now >= self.silent_until {
                    out.push(self.frame(MessageType::HeartbeatAck, HeartbeatBody { at: now }));
                }
            }
            MessageType::Error => {
                if let Ok(e) = msg.body_as::<ErrorBody>() {
                    if e.code == "second-login" {
                        self.stats.superseded = true;
                    }
                    self.stats.errors.push(e.code);
                }
            }
            _ => {}
        }
        out
    }

    fn apply_change(&mut self, c: ChangeBody) {
        self.stats.changes_received += 1;
        let k = (c.scope, c.key);
        let prev = self.view.get(&k).map(|(_, v)| *v).unwrap_or(0);
        if c.version <= prev {
            self.stats
                .order_violations
                .push(format!("{}/{} v{} after v{}", k.0, k.1, c.version, prev));
            return;
        }
        match c.op {
            ChangeOp::Set => {
                self.view.insert(k, (c.value, c.version));
            }
            ChangeOp::Append => {
                let entry = self.view.entry(k).or_insert((Value::Array(Vec::new()), 0));
                if let Value::Array(items) = &mut entry.0 {
                    items.push(c.value);
                } else {
                    entry.0 = Value::Array(vec![c.value]);
                }
                entry.1 = c.version;
            }
        }
    }

    fn schedule(&mut self, at: u64, step: Step) {
        self.queue.push_back((at, step));
    }

    /// Schedules whatever the current state calls for.
    fn react(&mut self, now: u64) {
        let Some(state) = self.state.clone() else { return };
        match state.phase {
            Phase::Consent | Phase::Intro | Phase::Outro if self.flow_sent != Some(state.phase) => {
                self.flow_sent = Some(state.phase);
                let mut at = now + self.think();
                match state.phase {
                    Phase::Consent => self.schedule(at, Step::Flow(FlowEvent::Consented)),
                    Phase::Intro => {
                        for step in 1..=self.plan.intro_steps {
                            self.schedule(at, Step::Intro(step));
                            at += self.think();
                        }
                        self.schedule(at, Step::Flow(FlowEvent::IntroDone));
                    }
                    _ => {
                        if self.plan.survey {
                            self.schedule(at, Step::Flow(FlowEvent::SurveyDone));
                        }
                    }
                }
            }
            Phase::Game => {
                let Some(game) = state.game else { return };
                let (Some(stage), Cursor::At { round, .. }) = (game.stage_id.clone(), game.cursor) else {
                    return;
                };
                let resuming = std::mem::take(&mut self.resuming);
                if game.status != GameStatus::Running {
                    return;
                }
                if self.acted_stage.as_deref() != Some(stage.as_str()) {
                    self.acted_stage = Some(stage.clone());
                    self.progress = 0;
                } else if !resuming {
                    return;
                }
                self.queue
                    .retain(|(_, s)| !matches!(s, Step::Act { .. } | Step::Write { .. }));
                let name = game.stage_name.unwrap_or_default();
                let plan = self.plan.clone();
                let Some(rule) = plan.stages.iter().find(|r| r.matches(&name, round, self.index)) else {
                    return;
                };
                let mut at = now;
                for (idx, action) in rule.actions.iter().enumerate().skip(self.progress) {
                    at += match action {
                        Action::Wait(ms) => *ms,
                        _ => self.think(),
                    };
                    self.schedule(
                        at,
                        Step::Act {
                            stage: stage.clone(),
                            idx,
                            action: action.clone(),
                        },
                    );
                }
            }
            _ => {}
        }
    }

    /// Runs every step that is due.
    pub fn poll(&mut self, now: u64) -> Vec<BotOutput> {
        let mut out = Vec::new();
        if self.gone || now < self.silent_until {
            return out;
        }
        while let Some(i) = self
            .queue
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| *t <= now)
            .min_by_key(|(i, (t, _))| (*t, *i))
            .map(|(i, _)| i)
        {
            let (_, step) = self.queue.remove(i).expect("index from iter");
            if matches!(step, Step::Connect) {
                out.push(BotOutput::Connect);
                continue;
            }
            if !self.connected {
                match &step {
                    // resent after the resume snapshot
                    Step::Flow(_) | Step::Intro(_) => self.flow_sent = None,
                    Step::Write { .. }
                    | Step::Act {
                        action: Action::Set(_) | Action::Append(_),
                        ..
                    } => {
                        self.unsent += 1;
                        self.stats.dropped_writes += 1;
                    }
                    _ => {}
                }
                continue;
            }
            self.run(step, now, &mut out);
            if now < self.silent_until || !self.connected {
                break;
            }
        }
        out
    }

    fn scope_for(&self, kind: ScopeKind) -> Option<ScopeRef> {
        let me = self.player.clone()?;
        let game = self.state.as_ref()?.game.as_ref();
        Some(match kind {
            ScopeKind::Player => ScopeRef::player(me),
            ScopeKind::Game => ScopeRef::game(&game?.id),
            ScopeKind::Round => ScopeRef::round(game?.round_id.clone()?),
            ScopeKind::Stage => ScopeRef::stage(game?.stage_id.clone()?),
            ScopeKind::PlayerRound => ScopeRef::player_round(game?.round_id.clone()?, me),
            ScopeKind::PlayerStage => ScopeRef::player_stage(game?.stage_id.clone()?, me),
        })
    }

    fn current_stage(&self) -> Option<String> {
        self.state.as_ref()?.game.as_ref()?.stage_id.clone()
    }

    fn run(&mut self, step: Step, now: u64, out: &mut Vec<BotOutput>) {
        match step {
            Step::Flow(event) => {
                let f = self.frame(
                    MessageType::Submit,
                    SubmitBody {
                        flow: Some(event),
                        ..SubmitBody::default()
                    },
                );
                out.push(f);
            }
            Step::Intro(n) => {
                let f = self.frame(
                    MessageType::Submit,
                    SubmitBody {
                        intro_step: Some(n),
                        ..SubmitBody::default()
                    },
                );
                out.push(f);
            }
            Step::Write { stage, intent } => {
                if self.current_stage().as_deref() == Some(stage.as_str()) {
                    self.stats.intents_sent += 1;
                    let f = self.frame(MessageType::Change, intent);
                    out.push(f);
                }
            }
            Step::Act { stage, idx, action } => {
                if self.current_stage().as_deref() != Some(stage.as_str()) {
                    return;
                }
                self.progress = idx + 1;
                match action {
                    Action::Set(w) => self.write(&w, ChangeOp::Set, out),
                    Action::Append(w) => self.write(&w, ChangeOp::Append, out),
                    Action::Submit => {
                        self.stats.submits_sent += 1;
                        let f = self.frame(
                            MessageType::Submit,
                            SubmitBody {
                                stage: Some(stage),
                                ..SubmitBody::default()
                            },
                        );
                        out.push(f);
                    }
                    Action::Wait(_) => {}
                    Action::Disconnect { reconnect_after_ms } => {
                        self.connected = false;
                        out.push(BotOutput::Close);
                        match reconnect_after_ms {
                            Some(ms) => self.schedule(now + ms, Step::Connect),
                            None => self.gone = true,
                        }
                    }
                    Action::Silence { ms } => self.silent_until = now + ms,
                    Action::Fuzz(f) => self.fuzz(&f, &stage, now),
                }
            }
            Step::Connect => {}
        }
    }

    fn write(&mut self, w: &WriteAction, op: ChangeOp, out: &mut Vec<BotOutput>) {
        let Some(scope) = self.scope_for(w.scope) else { return };
        let value = w.value.sample(&mut self.rng);
        self.stats.intents_sent += 1;
        let f = self.frame(
            MessageType::Change,
            ChangeIntent {
                scope,
                key: w.key.clone(),
                op,
                value,
            },
        );
        out.push(f);
    }

    fn fuzz(&mut self, f: &FuzzAction, stage: &str, now: u64) {
        if f.keys.is_empty() || f.scopes.is_empty() {
            return;
        }
        for _ in 0..f.count {
            let kind = f.scopes[self.rng.random_range(0..f.scopes.len())];
            let Some(scope) = self.scope_for(kind) else { continue };
            let key = f.keys[self.rng.random_range(0..f.keys.len())].clone();
            let op = if self.rng.random_bool(f.append_ratio.clamp(0.0, 1.0)) {
                ChangeOp::Append
            } else {
                ChangeOp::Set
            };
            let value = serde_json::json!(self.rng.random_range(0..1_000_000u32));
            let key = match op {
                // appends get their own keys so sets never turn a list into a scalar
                ChangeOp::Append => format!("{key}.log"),
                ChangeOp::Set => key,
            };
            let at = now
                + if f.spread_ms > 0 {
                    self.rng.random_range(0..=f.spread_ms)
                } else {
                    0
                };
            self.schedule(
                at,
                Step::Write {
                    stage: stage.to_string(),
                    intent: ChangeIntent { scope, key, op, value },
                },
            );
        }
    }

    /// Round id of the current stage, if any.
    pub fn current_round(&self) -> Option<String> {
        let g = self.state.as_ref()?.game.as_ref()?;
        match g.cursor {
            Cursor::At { round, .. } => Some(round_id(&g.id, round)),
            _ => None,
        }
    }
}
