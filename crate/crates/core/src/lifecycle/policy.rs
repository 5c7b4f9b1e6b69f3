use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisconnectMode {
    ContinueWithout,
    CancelTrial,
    PauseTrial,
    /// Delegates to `Callbacks::on_disconnect`.
    Custom,
}

/// What happens when a player in a running game is declared dead and does
/// not come back within `grace_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisconnectPolicy {
    pub mode: DisconnectMode,
    #[serde(default = "default_grace")]
    pub grace_s: u32,
}

pub const DEFAULT_GRACE_S: u32 = 30;

fn default_grace() -> u32 {
    DEFAULT_GRACE_S
}

impl Default for DisconnectPolicy {
    fn default() -> Self {
        Self {
            mode: DisconnectMode::ContinueWithout,
            grace_s: DEFAULT_GRACE_S,
        }
    }
}

impl DisconnectPolicy {
    pub fn new(mode: DisconnectMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn grace_ms(&self) -> u64 {
        u64::from(self.grace_s) * 1000
    }
}

/// Outcome of applying a disconnect policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisconnectAction {
    Removed,
    Cancelled,
    Paused,
    Custom,
    /// Game was no longer live when the grace period ran out.
    Ignored,
}
