//! Declarative game structure for experiments that need no custom code.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::GameCtx;
use crate::model::{StageDef, Value};
use crate::treatments::Treatment;

use super::callbacks::{CallbackError, CallbackResult, Callbacks};
use super::policy::{DisconnectMode, DisconnectPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundLayout {
    pub stages: Vec<StageDef>,
}

/// Game file: a fixed round structure, public keys, initial game data and a
/// disconnect policy.
///
/// ```yaml
/// rounds: 20
/// stages:
///   - {name: guess, duration: 30, submit_advance: true}
///   - {name: feedback, duration: 10}
/// public_keys: [guess]
/// disconnect: {mode: continue_without, grace_s: 30}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameLayout {
    /// Repeat `stages` this many times. Ignored when `round_list` is given.
    #[serde(default)]
    pub rounds: Option<usize>,
    /// Factor whose value overrides `rounds` per treatment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_factor: Option<String>,
    #[serde(default)]
    pub stages: Vec<StageDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub round_list: Vec<RoundLayout>,
    #[serde(default)]
    pub public_keys: Vec<String>,
    #[serde(default)]
    pub disconnect: DisconnectPolicy,
    #[serde(default)]
    pub game_attributes: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("game file: {0}")]
    Parse(String),
    #[error("game file: {0}")]
    Invalid(String),
}

impl LayoutError {
    pub fn code(&self) -> &'static str {
        "game-invalid"
    }
}

impl GameLayout {
    pub fn parse(text: &str) -> Result<Self, LayoutError> {
        let layout: GameLayout = serde_yaml::from_str(text).map_err(|e| LayoutError::Parse(e.to_string()))?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("layout serializes")
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        let bad = |m: &str| Err(LayoutError::Invalid(m.to_string()));
        if self.round_list.is_empty() {
            if self.stages.is_empty() {
                return bad("either stages or round_list is required");
            }
            if self.rounds.unwrap_or(1) == 0 {
                return bad("rounds must be at least 1");
            }
        } else if self.round_list.iter().any(|r| r.stages.is_empty()) {
            return bad("every round needs at least one stage");
        }
        let all = self.stages.iter().chain(self.round_list.iter().flat_map(|r| &r.stages));
        for s in all {
            if s.name.is_empty() {
                return bad("stage names must not be empty");
            }
            if s.duration == Some(0) {
                return bad("stage duration must be positive");
            }
            if s.duration.is_none() && !s.submit_advance {
                return bad(&format!("stage {:?} has neither a duration nor submit_advance", s.name));
            }
        }
        if self.disconnect.mode == DisconnectMode::Custom {
            return bad("disconnect mode custom needs server code; use continue_without, cancel_trial or pause_trial");
        }
        Ok(())
    }

    /// The rounds this layout produces for a treatment.
    pub fn rounds_for(&self, treatment: &Treatment) -> Vec<Vec<StageDef>> {
        if !self.round_list.is_empty() {
            return self.round_list.iter().map(|r| r.stages.clone()).collect();
        }
        let n = self
            .rounds_factor
            .as_ref()
            .and_then(|f| treatment.assignments.get(f))
            .and_then(Value::as_u64)
            .map(|n| n as usize)
            .or(self.rounds)
            .unwrap_or(1);
        vec![self.stages.clone(); n]
    }
}

impl Callbacks for GameLayout {
    fn on_game_init(&self, ctx: &mut GameCtx<'_>) -> CallbackResult {
        let treatment = ctx.treatment().clone();
        let game = ctx.game_scope();
        ctx.set(
            &game,
            "treatment",
            serde_json::to_value(&treatment.assignments).expect("json"),
        )?;
        for (k, v) in &self.game_attributes {
            ctx.set(&game, k, v.clone())?;
        }
        for k in &self.public_keys {
            ctx.mark_public(k)?;
        }
        let rounds = self.rounds_for(&treatment);
        if rounds.is_empty() {
            return Err(CallbackError::new("layout produced no rounds"));
        }
        for stages in rounds {
            ctx.add_round(stages)?;
        }
        Ok(())
    }

    fn disconnect_policy(&self, _treatment: &Treatment) -> DisconnectPolicy {
        self.disconnect
    }
}
