use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    GameInit,
    RoundStart,
    StageStart,
    StageEnd,
    RoundEnd,
    GameEnd,
    /// `on_change`; only ever appears in failure records.
    Change,
    /// `on_disconnect`; only ever appears in failure records.
    Disconnect,
}

impl HookKind {
    pub fn short(self) -> &'static str {
        match self {
            HookKind::GameInit => "init",
            HookKind::RoundStart => "rs",
            HookKind::StageStart => "ss",
            HookKind::StageEnd => "se",
            HookKind::RoundEnd => "re",
            HookKind::GameEnd => "ge",
            HookKind::Change => "change",
            HookKind::Disconnect => "disconnect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookRecord {
    pub hook: HookKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

/// Shape of a hook trace that matched `init (rs (ss se)+ re)+ ge`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceShape {
    /// Stages per round, for every round that was entered.
    pub stages: Vec<usize>,
    pub complete: bool,
}

impl TraceShape {
    pub fn rounds(&self) -> usize {
        self.stages.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum At {
    Start,
    Init,
    Round { r: usize, s: usize },
    Stage { r: usize, s: usize },
    RoundDone { r: usize },
    Done,
}

/// Checks a per-game hook trace against `init (rs (ss se)+ re)+ ge` with
/// sequential round and stage indexes. When `allow_prefix` is set (the game
/// was cancelled) any prefix of a valid trace is accepted.
pub fn check_hook_trace(trace: &[HookRecord], allow_prefix: bool) -> Result<TraceShape, String> {
    use HookKind::*;
    let mut at = At::Start;
    let mut stages: Vec<usize> = Vec::new();
    for (i, h) in trace.iter().enumerate() {
        let next = match (at, h.hook, h.round, h.stage) {
            (At::Start, GameInit, None, None) => At::Init,
            (At::Init, RoundStart, Some(0), None) => At::Round { r: 0, s: 0 },
            (At::RoundDone { r }, RoundStart, Some(n), None) if n == r + 1 => At::Round { r: n, s: 0 },
            (At::Round { r, s }, StageStart, Some(rr), Some(ss)) if rr == r && ss == s => At::Stage { r, s },
            (At::Stage { r, s }, StageEnd, Some(rr), Some(ss)) if rr == r && ss == s => At::Round { r, s: s + 1 },
            (At::Round { r, s }, RoundEnd, Some(rr), None) if rr == r && s > 0 => {
                stages.push(s);
                At::RoundDone { r }
            }
            (At::RoundDone { .. }, GameEnd, None, None) => At::Done,
            _ => {
                return Err(format!(
                    "hook #{i} {}(round={:?}, stage={:?}) not allowed after {at:?}",
                    h.hook.short(),
                    h.round,
                    h.stage
                ))
            }
        };
        at = next;
    }
    let complete = at == At::Done;
    if !complete && !allow_prefix {
        return Err(format!("trace ended early in state {at:?}"));
    }
    if let At::Round { s, .. } | At::Stage { s, .. } = at {
        stages.push(s);
    }
    Ok(TraceShape { stages, complete })
}
