//! Bot script files.
//!
//! ```yaml
//! bots:
//!   - name: guesser
//!     count: 12
//!     think_ms: [200, 2000]
//!     stages:
//!       - stage: guess
//!         actions:
//!           - set: {scope: player_stage, key: guess, value: {uniform: [0.0, 1.0]}}
//!           - submit
//!       - actions: [submit]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ScopeKind, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BotScript {
    pub bots: Vec<BotGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BotGroup {
    pub name: String,
    #[serde(default = "one")]
    pub count: usize,
    /// Mixed into the scenario seed for this group's randomness.
    #[serde(default)]
    pub seed: u64,
    /// Delay range before each action, in ms.
    #[serde(default = "default_think")]
    pub think_ms: (u64, u64),
    /// Bots connect at a uniform random time in `[0, arrive_within_ms]`.
    #[serde(default)]
    pub arrive_within_ms: u64,
    /// Intro steps reported before finishing the intro.
    #[serde(default)]
    pub intro_steps: u32,
    /// Finish the exit survey once in the outro.
    #[serde(default = "yes")]
    pub survey: bool,
    #[serde(default)]
    pub stages: Vec<StageRule>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_think() -> (u64, u64) {
    (100, 1_000)
}

/// What to do when a stage starts. The first matching rule wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRule {
    /// Stage name; absent matches any.
    #[serde(default)]
    pub stage: Option<String>,
    /// Round index; absent matches any.
    #[serde(default)]
    pub round: Option<usize>,
    /// Bot indexes within the group; absent matches all.
    #[serde(default)]
    pub only: Option<Vec<usize>>,
    #[serde(default)]
    pub actions: Vec<Action>,
}

impl StageRule {
    pub fn matches(&self, stage_name: &str, round: usize, index: usize) -> bool {
        self.stage.as_deref().is_none_or(|s| s == stage_name)
            && self.round.is_none_or(|r| r == round)
            && self.only.as_ref().is_none_or(|o| o.contains(&index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Set(WriteAction),
    Append(WriteAction),
    Submit,
    /// Extra pause before the next action.
    Wait(u64),
    /// Drop the connection; reconnect with the session token after the delay,
    /// or never.
    Disconnect {
        #[serde(default)]
        reconnect_after_ms: Option<u64>,
    },
    /// Stay connected but send nothing, not even heartbeat acks.
    Silence {
        ms: u64,
    },
    /// Burst of random writes, for convergence testing.
    Fuzz(FuzzAction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WriteAction {
    pub scope: ScopeKind,
    pub key: String,
    pub value: ValueGen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzAction {
    pub count: usize,
    pub keys: Vec<String>,
    #[serde(default = "fuzz_scopes")]
    pub scopes: Vec<ScopeKind>,
    /// Share of writes that are appends (the rest are sets), 0..=1.
    #[serde(default)]
    pub append_ratio: f64,
    /// Writes are spread uniformly over this window.
    #[serde(default)]
    pub spread_ms: u64,
}

fn fuzz_scopes() -> Vec<ScopeKind> {
    vec![ScopeKind::Game]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Uniform(f64, f64),
    Int(i64, i64),
    Choice(Vec<Value>),
}

/// A literal value or a random generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueGen {
    Random(Generator),
    Literal(Value),
}

impl ValueGen {
    pub fn sample(&self, rng: &mut impl Rng) -> Value {
        match self {
            ValueGen::Literal(v) => v.clone(),
            ValueGen::Random(Generator::Uniform(a, b)) => {
                let x = if b > a { rng.random_range(*a..*b) } else { *a };
                serde_json::json!(x)
            }
            ValueGen::Random(Generator::Int(a, b)) => {
                let x = if b > a { rng.random_range(*a..=*b) } else { *a };
                serde_json::json!(x)
            }
            ValueGen::Random(Generator::Choice(vs)) => {
                if vs.is_empty() {
                    Value::Null
                } else {
                    vs[rng.random_range(0..vs.len())].clone()
                }
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("bot script: {0}")]
pub struct ScriptError(pub String);

impl BotScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        // through a JSON tree so actions can be written as `set: {...}` maps
        let tree: Value = serde_yaml::from_str(text).map_err(|e| ScriptError(e.to_string()))?;
        let s: BotScript = serde_json::from_value(tree).map_err(|e| ScriptError(e.to_string()))?;
        if s.bots.is_empty() {
            return Err(ScriptError("at least one bot group is required".into()));
        }
        for g in &s.bots {
            if g.name.is_empty() || g.count == 0 {
                return Err(ScriptError(format!("group {:?} needs a name and count ≥ 1", g.name)));
            }
            if g.think_ms.0 > g.think_ms.1 {
                return Err(ScriptError(format!("group {:?}: think_ms range is reversed", g.name)));
            }
        }
        Ok(s)
    }

    pub fn to_yaml(&self) -> String {
        let tree = serde_json::to_value(self).expect("script serializes");
        serde_yaml::to_string(&tree).expect("script serializes")
    }

    pub fn total_bots(&self) -> usize {
        self.bots.iter().map(|g| g.count).sum()
    }
}
