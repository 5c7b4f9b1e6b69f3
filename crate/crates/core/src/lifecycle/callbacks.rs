use std::fmt;

use crate::engine::GameCtx;
use crate::model::{ScopeRef, Value};
use crate::treatments::Treatment;

use super::policy::DisconnectPolicy;

/// Failure raised by experiment code. Any failure cancels the game.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallbackError(pub String);

impl CallbackError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for CallbackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CallbackError {}

impl From<crate::model::ModelError> for CallbackError {
    fn from(e: crate::model::ModelError) -> Self {
        Self(e.to_string())
    }
}

pub type CallbackResult = Result<(), CallbackError>;

/// A committed client write, as seen by `on_change`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeNotice {
    pub scope: ScopeRef,
    pub key: String,
    pub value: Value,
    pub version: u64,
    pub actor: String,
}

/// Server-side experiment logic. Every hook is optional.
///
/// Hooks run on the game's serial executor and complete before the
/// transition they guard becomes visible to any client. `on_game_init` must
/// add at least one round.
pub trait Callbacks: Send + Sync {
    fn on_game_init(&self, _ctx: &mut GameCtx<'_>) -> CallbackResult {
        Ok(())
    }

    fn on_round_start(&self, _ctx: &mut GameCtx<'_>, _round: usize) -> CallbackResult {
        Ok(())
    }

    fn on_stage_start(&self, _ctx: &mut GameCtx<'_>, _round: usize, _stage: usize) -> CallbackResult {
        Ok(())
    }

    fn on_stage_end(&self, _ctx: &mut GameCtx<'_>, _round: usize, _stage: usize) -> CallbackResult {
        Ok(())
    }

    fn on_round_end(&self, _ctx: &mut GameCtx<'_>, _round: usize) -> CallbackResult {
        Ok(())
    }

    fn on_game_end(&self, _ctx: &mut GameCtx<'_>) -> CallbackResult {
        Ok(())
    }

    /// Runs after a client write commits and before it is propagated.
    fn on_change(&self, _ctx: &mut GameCtx<'_>, _change: &ChangeNotice) -> CallbackResult {
        Ok(())
    }

    fn disconnect_policy(&self, _treatment: &Treatment) -> DisconnectPolicy {
        DisconnectPolicy::default()
    }

    /// Invoked for `DisconnectMode::Custom` once the grace period expires.
    fn on_disconnect(&self, _ctx: &mut GameCtx<'_>, player: &str) -> CallbackResult {
        Err(CallbackError(format!("no custom disconnect handler for {player}")))
    }
}
