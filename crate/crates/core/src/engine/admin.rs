//! Operator actions and read-only summaries.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::events::Event;
use crate::export::{export_batch, ExportBundle, ExportOptions};
use crate::lifecycle::{FlowEvent, LobbyStatus};
use crate::model::{BatchStatus, Cursor, ExitReason, GameStatus};
use crate::treatments::{parse_protocol, BatchSpec, ProtocolError};

use super::{Engine, EngineError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LobbySummary {
    pub game: String,
    #[serde(flatten)]
    pub status: LobbyStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameSummary {
    pub id: String,
    pub treatment: String,
    pub status: GameStatus,
    pub cursor: Cursor,
    pub rounds: usize,
    pub players: Vec<String>,
    pub active: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub id: String,
    pub name: String,
    pub protocol: String,
    pub status: BatchStatus,
    pub games_by_status: BTreeMap<String, usize>,
    pub players_by_phase: BTreeMap<String, usize>,
    pub lobbies: Vec<LobbySummary>,
    pub games: Vec<GameSummary>,
    pub journal_offset: u64,
}

impl Engine {
    /// Stores a protocol after validation; returns its id.
    pub fn import_protocol(&mut self, actor: &str, yaml: &str, now: u64) -> Result<String, EngineError> {
        self.now = now;
        parse_protocol(yaml)?;
        let id = self.world.next_protocol_id();
        self.commit(Event::ProtocolImported {
            actor: actor.to_string(),
            protocol: id.clone(),
            yaml: yaml.to_string(),
            sha256: hex::encode(Sha256::digest(yaml.as_bytes())),
        })?;
        Ok(id)
    }

    /// Creates a batch from a spec. A missing seed is drawn and recorded so
    /// the assignment replays identically.
    pub fn create_batch(
        &mut self,
        actor: &str,
        protocol: &str,
        mut spec: BatchSpec,
        now: u64,
    ) -> Result<String, EngineError> {
        self.now = now;
        let stored = self
            .world
            .protocols
            .get(protocol)
            .ok_or_else(|| EngineError::NotFound(format!("protocol {protocol}")))?;
        let problems = stored.protocol.check_batch(&spec);
        if !problems.is_empty() {
            return Err(ProtocolError::Validation(problems).into());
        }
        if spec.seed.is_none() {
            spec.seed = Some(self.random_u64());
        }
        let id = self.world.next_batch_id();
        self.commit(Event::BatchCreated {
            actor: actor.to_string(),
            batch: id.clone(),
            protocol: protocol.to_string(),
            spec,
        })?;
        Ok(id)
    }

    /// Creates a batch from one named in the protocol file.
    pub fn create_named_batch(
        &mut self,
        actor: &str,
        protocol: &str,
        name: &str,
        now: u64,
    ) -> Result<String, EngineError> {
        let spec = self
            .world
            .protocols
            .get(protocol)
            .ok_or_else(|| EngineError::NotFound(format!("protocol {protocol}")))?
            .protocol
            .batch(name)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("batch {name} in {protocol}")))?;
        self.create_batch(actor, protocol, spec, now)
    }

    /// Opens one lobby per game in the batch's quotas and seats waiting players.
    pub fn start_batch(&mut self, actor: &str, batch: &str, now: u64) -> Result<(), EngineError> {
        self.now = now;
        let b = self
            .world
            .batches
            .get(batch)
            .ok_or_else(|| EngineError::NotFound(format!("batch {batch}")))?;
        if b.status != BatchStatus::Created {
            return Err(EngineError::Conflict(format!("batch {batch} is {:?}", b.status)));
        }
        let protocol = &self.world.protocols[&b.protocol_id].protocol;
        let lobby = protocol.lobby(&b.spec.lobby).cloned().expect("checked at creation");
        let mut games = Vec::new();
        for q in &b.spec.quotas {
            let t = protocol.treatment(&q.treatment).cloned().expect("checked at creation");
            for _ in 0..q.count {
                games.push(t.clone());
            }
        }
        self.commit(Event::BatchStarted {
            actor: actor.to_string(),
            batch: batch.to_string(),
        })?;
        for treatment in games {
            let game = self.world.next_game_id();
            self.commit(Event::GameCreated {
                game,
                batch: batch.to_string(),
                treatment,
                lobby: lobby.clone(),
            })?;
        }
        self.drain_waitlist()?;
        self.settle();
        Ok(())
    }

    /// Cancels every live game in the batch; players leave as terminated.
    pub fn stop_batch(&mut self, actor: &str, batch: &str, now: u64) -> Result<(), EngineError> {
        self.now = now;
        let b = self
            .world
            .batches
            .get(batch)
            .ok_or_else(|| EngineError::NotFound(format!("batch {batch}")))?;
        if b.status != BatchStatus::Running {
            return Err(EngineError::Conflict(format!("batch {batch} is {:?}", b.status)));
        }
        let games = b.games.clone();
        self.commit(Event::BatchStopped {
            actor: actor.to_string(),
            batch: batch.to_string(),
        })?;
        for g in games {
            self.cancel_game(&g, "terminated", ExitReason::Terminated)?;
        }
        self.settle();
        Ok(())
    }

    pub fn terminate_game(&mut self, actor: &str, game: &str, now: u64) -> Result<(), EngineError> {
        self.now = now;
        let g = self
            .world
            .games
            .get(game)
            .ok_or_else(|| EngineError::NotFound(format!("game {game}")))?;
        if g.status.is_terminal() {
            return Err(EngineError::Conflict(format!(
                "game {game} already {}",
                g.status.as_str()
            )));
        }
        self.commit(Event::GameTerminated {
            actor: actor.to_string(),
            game: game.to_string(),
        })?;
        self.cancel_game(game, "terminated", ExitReason::Terminated)?;
        self.settle();
        Ok(())
    }

    /// Revokes a player's token and identifier mapping and takes them out of
    /// any lobby or roster. Their data stays.
    pub fn retire_player(&mut self, actor: &str, player: &str, now: u64) -> Result<(), EngineError> {
        self.now = now;
        let p = self
            .world
            .players
            .get(player)
            .ok_or_else(|| EngineError::NotFound(format!("player {player}")))?;
        if p.retired {
            return Err(EngineError::Conflict(format!("player {player} already retired")));
        }
        let game = p.current_game.clone();
        self.commit(Event::PlayerRetired {
            actor: actor.to_string(),
            player: player.to_string(),
        })?;
        if let Some(g) = game {
            let game = &self.world.games[&g];
            if game.status == GameStatus::Pending {
                self.commit(Event::LobbyLeft {
                    game: g,
                    player: player.to_string(),
                })?;
            } else if game.is_live() && game.active.contains(player) {
                self.commit(Event::RosterRemoved {
                    game: g.clone(),
                    player: player.to_string(),
                })?;
                if self.world.games[&g].active.is_empty() {
                    self.cancel_game(&g, "roster_empty", ExitReason::Cancelled)?;
                }
            }
        }
        if let Some(conn) = self.sessions.get_mut(player).and_then(|s| s.conn.take()) {
            self.send_error(conn, &EngineError::Auth("player retired".into()), None);
            self.outbox.push(super::Outbound::Close { conn });
            self.conns.remove(&conn);
        }
        self.settle();
        Ok(())
    }

    /// Stage submission on behalf of a player (same rules as the wire path).
    pub fn submit_stage(&mut self, player: &str, stage: &str, now: u64) -> Result<bool, EngineError> {
        self.now = now;
        let game = self
            .world
            .player(player)?
            .current_game
            .clone()
            .ok_or_else(|| EngineError::BadRequest(format!("{player} is not in a game")))?;
        let r = self.submit(&game, player, stage);
        self.settle();
        r
    }

    /// Flow step on behalf of a player (same rules as the wire path).
    pub fn advance_player(&mut self, player: &str, event: FlowEvent, now: u64) -> Result<(), EngineError> {
        self.now = now;
        let r = self.flow(player, event);
        self.settle();
        r
    }

    pub fn batch_summary(&self, batch: &str) -> Result<BatchSummary, EngineError> {
        let b = self
            .world
            .batches
            .get(batch)
            .ok_or_else(|| EngineError::NotFound(format!("batch {batch}")))?;
        let mut games_by_status = BTreeMap::new();
        let mut lobbies = Vec::new();
        let mut games = Vec::new();
        for gid in &b.games {
            let g = &self.world.games[gid];
            *games_by_status.entry(g.status.as_str().to_string()).or_insert(0) += 1;
            if g.status == GameStatus::Pending {
                lobbies.push(LobbySummary {
                    game: g.id.clone(),
                    status: g.lobby.status(g.player_count(), self.now),
                });
            }
            games.push(GameSummary {
                id: g.id.clone(),
                treatment: g.treatment.name.clone(),
                status: g.status,
                cursor: g.cursor,
                rounds: g.rounds.len(),
                players: g.player_ids.clone(),
                active: g.active.iter().cloned().collect(),
                end_reason: g.end_reason.clone(),
            });
        }
        let mut players_by_phase = BTreeMap::new();
        for p in self
            .world
            .players
            .values()
            .filter(|p| p.batch.as_deref() == Some(batch))
        {
            *players_by_phase.entry(p.phase.as_str().to_string()).or_insert(0) += 1;
        }
        Ok(BatchSummary {
            id: b.id.clone(),
            name: b.spec.name.clone(),
            protocol: b.protocol_id.clone(),
            status: b.status,
            games_by_status,
            players_by_phase,
            lobbies,
            games,
            journal_offset: self.journal.next_offset(),
        })
    }

    /// Builds an export bundle and records that it was taken.
    pub fn export(
        &mut self,
        actor: &str,
        batch: &str,
        options: &ExportOptions,
        now: u64,
    ) -> Result<ExportBundle, EngineError> {
        self.now = now;
        let offset = self.journal.next_offset();
        let bundle = export_batch(&self.world, batch, options, offset)?;
        self.commit(Event::Exported {
            actor: actor.to_string(),
            batch: batch.to_string(),
            include_identifiers: options.include_identifiers,
        })?;
        Ok(bundle)
    }
}
