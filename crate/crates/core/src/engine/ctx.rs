use crate::events::Event;
use crate::lifecycle::CallbackError;
use crate::model::{round_id, stage_id, Cursor, ModelError, ScopeRef, StageDef, Value, SERVER_ACTOR};
use crate::treatments::Treatment;

use super::Engine;

/// Follow-up work requested from inside a hook, run once the hook returns.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Request {
    EndStage { round: usize, stage: usize },
    Cancel { reason: String },
    RemovePlayer { player: String },
}

/// Handle given to callbacks: read and write the game's data, shape its
/// rounds, and request transitions.
pub struct GameCtx<'a> {
    pub(crate) engine: &'a mut Engine,
    pub(crate) game: String,
    pub(crate) requests: Vec<Request>,
}

impl<'a> GameCtx<'a> {
    pub(crate) fn new(engine: &'a mut Engine, game: &str) -> Self {
        Self {
            engine,
            game: game.to_string(),
            requests: Vec::new(),
        }
    }

    fn game(&self) -> &crate::model::Game {
        &self.engine.world.games[&self.game]
    }

    pub fn game_id(&self) -> &str {
        &self.game
    }

    pub fn now(&self) -> u64 {
        self.engine.now
    }

    pub fn treatment(&self) -> &Treatment {
        &self.game().treatment
    }

    pub fn factor(&self, name: &str) -> Option<&Value> {
        self.game().treatment.assignments.get(name)
    }

    /// Roster fixed at start.
    pub fn players(&self) -> Vec<String> {
        self.game().player_ids.clone()
    }

    pub fn active_players(&self) -> Vec<String> {
        self.game().active.iter().cloned().collect()
    }

    pub fn cursor(&self) -> Cursor {
        self.game().cursor
    }

    pub fn round_count(&self) -> usize {
        self.game().rounds.len()
    }

    /// Appends a round with the given stages; returns its index.
    pub fn add_round(&mut self, stages: Vec<StageDef>) -> Result<usize, CallbackError> {
        if stages.is_empty() {
            return Err(CallbackError::new("a round needs at least one stage"));
        }
        if stages.iter().any(|s| s.duration == Some(0)) {
            return Err(CallbackError::new("stage duration must be positive"));
        }
        if self.game().status.is_terminal() {
            return Err(ModelError::GameClosed(self.game.clone()).into());
        }
        let round = self.round_count();
        self.engine
            .commit(Event::RoundAdded {
                game: self.game.clone(),
                round,
                stages,
            })
            .map_err(|e| CallbackError(e.to_string()))?;
        Ok(round)
    }

    /// Lets every member read this key on other members' player and
    /// composite scopes.
    pub fn mark_public(&mut self, key: &str) -> Result<(), CallbackError> {
        if self.game().public_keys.contains(key) {
            return Ok(());
        }
        self.engine
            .commit(Event::Publish {
                game: self.game.clone(),
                key: key.to_string(),
            })
            .map_err(|e| CallbackError(e.to_string()))
    }

    pub fn game_scope(&self) -> ScopeRef {
        ScopeRef::game(&self.game)
    }

    pub fn round_scope(&self, round: usize) -> ScopeRef {
        ScopeRef::round(round_id(&self.game, round))
    }

    pub fn stage_scope(&self, round: usize, stage: usize) -> ScopeRef {
        ScopeRef::stage(stage_id(&self.game, round, stage))
    }

    pub fn player_round(&self, player: &str, round: usize) -> ScopeRef {
        ScopeRef::player_round(round_id(&self.game, round), player)
    }

    pub fn player_stage(&self, player: &str, round: usize, stage: usize) -> ScopeRef {
        ScopeRef::player_stage(stage_id(&self.game, round, stage), player)
    }

    pub fn get(&self, scope: &ScopeRef, key: &str) -> Result<Option<Value>, ModelError> {
        Ok(self.engine.world.get(scope, key)?.cloned())
    }

    pub fn set(&mut self, scope: &ScopeRef, key: &str, value: Value) -> Result<u64, CallbackError> {
        self.engine
            .write(scope, key, value, SERVER_ACTOR, false)
            .map_err(|e| CallbackError(e.to_string()))
    }

    pub fn append(&mut self, scope: &ScopeRef, key: &str, value: Value) -> Result<u64, CallbackError> {
        self.engine
            .write(scope, key, value, SERVER_ACTOR, true)
            .map_err(|e| CallbackError(e.to_string()))
    }

    pub fn log(&mut self, scope: &ScopeRef, name: &str, payload: Value) -> Result<(), CallbackError> {
        let e = self.engine.world.plan_log(scope, name, payload, SERVER_ACTOR)?;
        self.engine.commit(e).map_err(|e| CallbackError(e.to_string()))
    }

    /// Ends the current stage once this hook returns.
    pub fn end_stage(&mut self) {
        if let Cursor::At { round, stage } = self.cursor() {
            self.requests.push(Request::EndStage { round, stage });
        }
    }

    /// Cancels the game once this hook returns; players leave with reason `custom`.
    pub fn cancel(&mut self, reason: &str) {
        self.requests.push(Request::Cancel {
            reason: reason.to_string(),
        });
    }

    /// Drops a player from the active roster once this hook returns.
    pub fn remove_player(&mut self, player: &str) {
        self.requests.push(Request::RemovePlayer {
            player: player.to_string(),
        });
    }
}
