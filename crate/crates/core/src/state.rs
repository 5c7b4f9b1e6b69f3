//! Engine state as a fold over journal events.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::events::Event;
use crate::lifecycle::{HookRecord, LobbyState, Phase};
use crate::model::{
    round_id, stage_id, AttrChange, AttributeStore, Batch, BatchStatus, Cursor, Game, GameStatus, LogEntry, ModelError,
    PauseState, Player, Round, ScopeKind, ScopeRef, Stage, StoredProtocol, Value,
};
use crate::treatments::parse_protocol;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot apply event: {0}")]
pub struct ApplyError(pub String);

impl From<ModelError> for ApplyError {
    fn from(e: ModelError) -> Self {
        ApplyError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub players: u64,
    pub games: u64,
    pub batches: u64,
    pub protocols: u64,
}

/// Everything the engine knows, reconstructible from the journal alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub players: BTreeMap<String, Player>,
    pub identifiers: BTreeMap<String, String>,
    pub tokens: BTreeMap<String, String>,
    pub games: BTreeMap<String, Game>,
    pub batches: BTreeMap<String, Batch>,
    pub protocols: BTreeMap<String, StoredProtocol>,
    pub store: AttributeStore,
    pub logs: Vec<LogEntry>,
    pub hooks: BTreeMap<String, Vec<HookRecord>>,
    pub waitlist: Vec<String>,
    pub rounds: BTreeMap<String, (String, usize)>,
    pub stages: BTreeMap<String, (String, usize, usize)>,
    pub counters: Counters,
}

fn missing(what: &str, id: &str) -> ApplyError {
    ApplyError(format!("unknown {what} {id}"))
}

impl World {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_player_id(&self) -> String {
        format!("p{}", self.counters.players + 1)
    }

    pub fn next_game_id(&self) -> String {
        format!("g{}", self.counters.games + 1)
    }

    pub fn next_batch_id(&self) -> String {
        format!("b{}", self.counters.batches + 1)
    }

    pub fn next_protocol_id(&self) -> String {
        format!("proto{}", self.counters.protocols + 1)
    }

    pub fn player(&self, id: &str) -> Result<&Player, ModelError> {
        self.players
            .get(id)
            .ok_or_else(|| ModelError::ScopeNotFound(format!("player:{id}")))
    }

    pub fn game(&self, id: &str) -> Result<&Game, ModelError> {
        self.games
            .get(id)
            .ok_or_else(|| ModelError::ScopeNotFound(format!("game:{id}")))
    }

    /// Checks that a scope names live entities and returns the game that owns
    /// it, if any. Player scopes belong to the player's current game.
    pub fn resolve_scope(&self, scope: &ScopeRef) -> Result<Option<&Game>, ModelError> {
        if !scope.is_well_formed() {
            return Err(ModelError::MalformedScope(scope.to_string()));
        }
        let not_found = || ModelError::ScopeNotFound(scope.to_string());
        match scope.kind {
            ScopeKind::Game => self.games.get(&scope.id).map(Some).ok_or_else(not_found),
            ScopeKind::Player => {
                let p = self.players.get(&scope.id).ok_or_else(not_found)?;
                Ok(p.current_game.as_ref().and_then(|g| self.games.get(g)))
            }
            ScopeKind::Round => {
                let (g, _) = self.rounds.get(&scope.id).ok_or_else(not_found)?;
                Ok(self.games.get(g))
            }
            ScopeKind::Stage => {
                let (g, _, _) = self.stages.get(&scope.id).ok_or_else(not_found)?;
                Ok(self.games.get(g))
            }
            ScopeKind::PlayerRound | ScopeKind::PlayerStage => {
                let g = if scope.kind == ScopeKind::PlayerRound {
                    &self.rounds.get(&scope.id).ok_or_else(not_found)?.0
                } else {
                    &self.stages.get(&scope.id).ok_or_else(not_found)?.0
                };
                let game = self.games.get(g).ok_or_else(not_found)?;
                let player = scope.player.as_deref().unwrap_or_default();
                if !game.is_member(player) {
                    return Err(not_found());
                }
                Ok(Some(game))
            }
        }
    }

    /// The game whose data a scope belongs to, for visibility and routing.
    pub fn scope_game(&self, scope: &ScopeRef) -> Option<&Game> {
        self.resolve_scope(scope).ok().flatten()
    }

    fn check_writable(&self, scope: &ScopeRef) -> Result<(), ModelError> {
        let game = self.resolve_scope(scope)?;
        if scope.kind != ScopeKind::Player {
            if let Some(g) = game {
                if g.status.is_terminal() {
                    return Err(ModelError::GameClosed(g.id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn plan_set(&self, scope: &ScopeRef, key: &str, value: Value, actor: &str) -> Result<AttrChange, ModelError> {
        self.check_writable(scope)?;
        self.store.plan_set(scope, key, value, actor)
    }

    pub fn plan_append(
        &self,
        scope: &ScopeRef,
        key: &str,
        element: Value,
        actor: &str,
    ) -> Result<AttrChange, ModelError> {
        self.check_writable(scope)?;
        self.store.plan_append(scope, key, element, actor)
    }

    pub fn plan_log(&self, scope: &ScopeRef, name: &str, payload: Value, actor: &str) -> Result<Event, ModelError> {
        self.check_writable(scope)?;
        Ok(Event::Log {
            scope: scope.clone(),
            name: name.to_string(),
            payload,
            actor: actor.to_string(),
        })
    }

    /// Current value; `None` if never written.
    pub fn get(&self, scope: &ScopeRef, key: &str) -> Result<Option<&Value>, ModelError> {
        self.resolve_scope(scope)?;
        Ok(self.store.get(scope, key).map(|a| &a.value))
    }

    /// Builds the player.round or player.stage scope for a member of the
    /// owning game.
    pub fn resolve_composite(&self, player: &str, round_or_stage: &str) -> Result<ScopeRef, ModelError> {
        let (game, scope) = if let Some((g, _)) = self.rounds.get(round_or_stage) {
            (g, ScopeRef::player_round(round_or_stage, player))
        } else if let Some((g, _, _)) = self.stages.get(round_or_stage) {
            (g, ScopeRef::player_stage(round_or_stage, player))
        } else {
            return Err(ModelError::ScopeNotFound(round_or_stage.to_string()));
        };
        if !self.games.get(game).is_some_and(|g| g.is_member(player)) {
            return Err(ModelError::ScopeNotFound(scope.to_string()));
        }
        Ok(scope)
    }

    /// Plans and applies a write in one step, for callers without a journal.
    pub fn set(&mut self, scope: &ScopeRef, key: &str, value: Value, actor: &str, at: u64) -> Result<u64, ModelError> {
        let c = self.plan_set(scope, key, value, actor)?;
        self.store.apply(&c, at)?;
        Ok(c.version)
    }

    pub fn append(
        &mut self,
        scope: &ScopeRef,
        key: &str,
        element: Value,
        actor: &str,
        at: u64,
    ) -> Result<u64, ModelError> {
        let c = self.plan_append(scope, key, element, actor)?;
        self.store.apply(&c, at)?;
        Ok(c.version)
    }

    fn player_mut(&mut self, id: &str) -> Result<&mut Player, ApplyError> {
        self.players.get_mut(id).ok_or_else(|| missing("player", id))
    }

    fn game_mut(&mut self, id: &str) -> Result<&mut Game, ApplyError> {
        self.games.get_mut(id).ok_or_else(|| missing("game", id))
    }

    fn stage_mut(&mut self, game: &str, round: usize, stage: usize) -> Result<&mut Stage, ApplyError> {
        self.game_mut(game)?
            .rounds
            .get_mut(round)
            .and_then(|r| r.stages.get_mut(stage))
            .ok_or_else(|| missing("stage", &stage_id(game, round, stage)))
    }

    /// Folds one event into the state.
    pub fn apply(&mut self, event: &Event, at: u64) -> Result<(), ApplyError> {
        use Event::*;
        match event {
            Set { .. } | Append { .. } => {
                let change = event.as_change().expect("set/append carry a change");
                self.store.apply(&change, at)?;
            }
            Publish { game, key } => {
                self.game_mut(game)?.public_keys.insert(key.clone());
            }
            Log {
                scope,
                name,
                payload,
                actor,
            } => self.logs.push(LogEntry {
                scope: scope.clone(),
                name: name.clone(),
                payload: payload.clone(),
                at,
                actor: actor.clone(),
            }),
            Hook {
                game,
                hook,
                round,
                stage,
            } => {
                self.game_mut(game)?;
                self.hooks.entry(game.clone()).or_default().push(HookRecord {
                    hook: *hook,
                    round: *round,
                    stage: *stage,
                });
            }
            HookFailed { .. } => {}
            PlayerPhase {
                player,
                from,
                to,
                reason,
                ..
            } => {
                let p = self.player_mut(player)?;
                if p.phase != *from {
                    return Err(ApplyError(format!(
                        "player {player} is in {:?}, not {:?}",
                        p.phase, from
                    )));
                }
                p.phase = *to;
                if reason.is_some() {
                    p.exit_reason = *reason;
                }
            }
            IntroStep { player, step } => self.player_mut(player)?.intro_step = Some(*step),
            RoundAdded { game, round, stages } => {
                let g = self.game_mut(game)?;
                if *round != g.rounds.len() {
                    return Err(ApplyError(format!("round {round} added out of order to {game}")));
                }
                let rid = round_id(game, *round);
                let built: Vec<Stage> = stages
                    .iter()
                    .enumerate()
                    .map(|(i, d)| Stage {
                        id: stage_id(game, *round, i),
                        index: i,
                        name: d.name.clone(),
                        duration: d.duration,
                        submit_advance: d.submit_advance,
                        submitted: BTreeSet::new(),
                        started_at: None,
                        deadline: None,
                        ended: None,
                        ended_at: None,
                    })
                    .collect();
                for s in &built {
                    self.stages.insert(s.id.clone(), (game.clone(), *round, s.index));
                }
                self.rounds.insert(rid.clone(), (game.clone(), *round));
                self.game_mut(game)?.rounds.push(Round {
                    id: rid,
                    index: *round,
                    stages: built,
                });
            }
            GameStarted { game, players } => {
                let g = self.game_mut(game)?;
                g.status = GameStatus::Running;
                g.player_ids = players.clone();
                g.active = players.iter().cloned().collect();
                g.lobby.members.clear();
            }
            StageStarted {
                game,
                round,
                stage,
                deadline,
            } => {
                let s = self.stage_mut(game, *round, *stage)?;
                s.started_at = Some(at);
                s.deadline = *deadline;
                self.game_mut(game)?.cursor = Cursor::At {
                    round: *round,
                    stage: *stage,
                };
            }
            Submitted {
                game,
                round,
                stage,
                player,
            } => {
                self.stage_mut(game, *round, *stage)?.submitted.insert(player.clone());
            }
            StageEnded {
                game,
                round,
                stage,
                reason,
            } => {
                let s = self.stage_mut(game, *round, *stage)?;
                s.ended = Some(*reason);
                s.ended_at = Some(at);
                s.deadline = None;
            }
            GameEnded { game } => {
                let g = self.game_mut(game)?;
                g.status = GameStatus::Ended;
                g.cursor = Cursor::Ended;
                g.end_reason = Some("completed".into());
            }
            GameCancelled { game, reason } => {
                let g = self.game_mut(game)?;
                g.status = GameStatus::Cancelled;
                g.end_reason = Some(reason.clone());
                g.paused = None;
                g.lobby.members.clear();
            }
            GamePaused {
                game,
                player,
                remaining_ms,
            } => {
                let g = self.game_mut(game)?;
                g.status = GameStatus::Paused;
                let pause = g.paused.get_or_insert_with(|| PauseState {
                    remaining_ms: *remaining_ms,
                    waiting_for: BTreeSet::new(),
                });
                pause.waiting_for.insert(player.clone());
                if let Cursor::At { round, stage } = g.cursor {
                    if let Some(s) = g.rounds.get_mut(round).and_then(|r| r.stages.get_mut(stage)) {
                        s.deadline = None;
                    }
                }
            }
            GameResumed { game, deadline } => {
                let g = self.game_mut(game)?;
                g.status = GameStatus::Running;
                g.paused = None;
                if let Cursor::At { round, stage } = g.cursor {
                    if let Some(s) = g.rounds.get_mut(round).and_then(|r| r.stages.get_mut(stage)) {
                        s.deadline = *deadline;
                    }
                }
            }
            PauseCleared { game, player } => {
                if let Some(p) = self.game_mut(game)?.paused.as_mut() {
                    p.waiting_for.remove(player);
                }
            }
            RosterRemoved { game, player } => {
                self.game_mut(game)?.active.remove(player);
                self.player_mut(player)?.dropped = true;
            }
            PlayerDropped { player } => self.player_mut(player)?.dropped = true,
            BatchEnded { batch } => {
                self.batches
                    .get_mut(batch)
                    .ok_or_else(|| missing("batch", batch))?
                    .status = BatchStatus::Ended;
            }
            GameCreated {
                game,
                batch,
                treatment,
                lobby,
            } => {
                let b = self.batches.get_mut(batch).ok_or_else(|| missing("batch", batch))?;
                b.games.push(game.clone());
                self.games.insert(
                    game.clone(),
                    Game {
                        id: game.clone(),
                        batch_id: batch.clone(),
                        treatment: treatment.clone(),
                        lobby_config: lobby.clone(),
                        lobby: LobbyState::open(at),
                        player_ids: Vec::new(),
                        active: BTreeSet::new(),
                        rounds: Vec::new(),
                        cursor: Cursor::PreStart,
                        status: GameStatus::Pending,
                        public_keys: BTreeSet::new(),
                        paused: None,
                        end_reason: None,
                    },
                );
                self.counters.games += 1;
            }
            LobbyJoined { game, player, position } => {
                let g = self.game_mut(game)?;
                if *position != g.lobby.members.len() {
                    return Err(ApplyError(format!("lobby position {position} out of order in {game}")));
                }
                let cfg = g.lobby_config.clone();
                g.lobby.join(player, &cfg, at);
                let batch = g.batch_id.clone();
                if let Some(b) = self.batches.get_mut(&batch) {
                    b.arrivals += 1;
                }
                let p = self.player_mut(player)?;
                p.current_game = Some(game.clone());
                p.batch = Some(batch);
                self.waitlist.retain(|w| w != player);
            }
            LobbyLeft { game, player } => {
                self.game_mut(game)?.lobby.leave(player);
                let p = self.player_mut(player)?;
                p.current_game = None;
            }
            LobbyExtended { game } => {
                let g = self.game_mut(game)?;
                let cfg = g.lobby_config.clone();
                g.lobby.extend(&cfg);
            }
            LobbyTimedOut { game, .. } => {
                self.game_mut(game)?;
            }
            Waitlisted { player } => {
                self.player_mut(player)?;
                if !self.waitlist.contains(player) {
                    self.waitlist.push(player.clone());
                }
            }
            PlayerCreated {
                player,
                identifier,
                token_hash,
            } => {
                if self.players.contains_key(player) || self.identifiers.contains_key(identifier) {
                    return Err(ApplyError(format!("player {player} or its identifier already exists")));
                }
                self.players.insert(
                    player.clone(),
                    Player {
                        id: player.clone(),
                        identifier: identifier.clone(),
                        token_hash: token_hash.clone(),
                        phase: Phase::Consent,
                        intro_step: None,
                        dropped: false,
                        exit_reason: None,
                        current_game: None,
                        batch: None,
                        retired: false,
                    },
                );
                self.identifiers.insert(identifier.clone(), player.clone());
                self.tokens.insert(token_hash.clone(), player.clone());
                self.counters.players += 1;
            }
            TokenRotated { player, token_hash } => {
                let p = self.player_mut(player)?;
                let old = std::mem::replace(&mut p.token_hash, token_hash.clone());
                self.tokens.remove(&old);
                self.tokens.insert(token_hash.clone(), player.clone());
            }
            Connected { player, .. } | Superseded { player } | Disconnected { player } | Liveness { player, .. } => {
                self.player_mut(player)?;
            }
            Startup { .. } => {}
            ProtocolImported {
                protocol, yaml, sha256, ..
            } => {
                let parsed = parse_protocol(yaml).map_err(|e| ApplyError(e.to_string()))?;
                self.protocols.insert(
                    protocol.clone(),
                    StoredProtocol {
                        id: protocol.clone(),
                        yaml: yaml.clone(),
                        sha256: sha256.clone(),
                        protocol: parsed,
                    },
                );
                self.counters.protocols += 1;
            }
            BatchCreated {
                batch, protocol, spec, ..
            } => {
                if !self.protocols.contains_key(protocol) {
                    return Err(missing("protocol", protocol));
                }
                self.batches.insert(
                    batch.clone(),
                    Batch {
                        id: batch.clone(),
                        protocol_id: protocol.clone(),
                        spec: spec.clone(),
                        status: BatchStatus::Created,
                        games: Vec::new(),
                        arrivals: 0,
                    },
                );
                self.counters.batches += 1;
            }
            BatchStarted { batch, .. } => {
                self.batches
                    .get_mut(batch)
                    .ok_or_else(|| missing("batch", batch))?
                    .status = BatchStatus::Running;
            }
            BatchStopped { batch, .. } => {
                self.batches
                    .get_mut(batch)
                    .ok_or_else(|| missing("batch", batch))?
                    .status = BatchStatus::Terminated;
            }
            GameTerminated { game, .. } => {
                self.game_mut(game)?;
            }
            PlayerRetired { player, .. } => {
                let p = self.player_mut(player)?;
                p.retired = true;
                let (ident, hash) = (p.identifier.clone(), p.token_hash.clone());
                self.identifiers.remove(&ident);
                self.tokens.remove(&hash);
            }
            Exported { .. } => {}
        }
        Ok(())
    }
}
