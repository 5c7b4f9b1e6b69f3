use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lifecycle::{FlowEvent, LobbyStatus, Phase};
use crate::model::{ChangeOp, Cursor, ExitReason, GameStatus, ScopeRef, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Hello,
    Welcome,
    Subscribe,
    Change,
    Submit,
    Heartbeat,
    HeartbeatAck,
    Transition,
    Error,
}

/// One JSON text frame. `seq` increases per connection and direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub seq: u64,
    #[serde(default)]
    pub body: Value,
}

#[derive(Debug, thiserror::Error)]
#[error("malformed frame: {0}")]
pub struct WireError(String);

impl WireMessage {
    pub fn new(kind: MessageType, seq: u64, body: impl Serialize) -> Self {
        Self {
            kind,
            seq,
            body: serde_json::to_value(body).expect("wire bodies serialize"),
        }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn decode(text: &str) -> Result<Self, WireError> {
        serde_json::from_str(text).map_err(|e| WireError(e.to_string()))
    }

    pub fn body_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.body.clone()).map_err(|e| WireError(format!("{:?} body: {e}", self.kind)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HelloBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identifier: Option<String>,
}

/// Client write request; the server answers with a `change` (or `error`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeIntent {
    pub scope: ScopeRef,
    pub key: String,
    pub op: ChangeOp,
    pub value: Value,
}

/// Either a stage submission, a flow step, or an intro step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubmitBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intro_step: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrView {
    pub scope: ScopeRef,
    pub key: String,
    pub value: Value,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeBody {
    pub scope: ScopeRef,
    pub key: String,
    pub op: ChangeOp,
    /// Full value for `set`, the appended element for `append`.
    pub value: Value,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameView {
    pub id: String,
    pub status: GameStatus,
    pub cursor: Cursor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remaining_ms: Option<u64>,
    pub rounds: usize,
    pub roster: Vec<String>,
    pub treatment: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobbyView {
    pub game: String,
    #[serde(flatten)]
    pub status: LobbyStatus,
}

/// Everything a client needs to render its current position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intro_step: Option<u32>,
    pub dropped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_reason: Option<ExitReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<GameView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lobby: Option<LobbyView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelcomeBody {
    pub player_id: String,
    /// Present only when a new token was issued on this hello.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub resumed: bool,
    pub state: ClientState,
    pub attributes: Vec<AttrView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscribeBody {
    pub attributes: Vec<AttrView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBody {
    pub reason: String,
    #[serde(flatten)]
    pub state: ClientState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatBody {
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_seq: Option<u64>,
}
