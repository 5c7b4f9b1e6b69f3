//! Journal event vocabulary. Every state change in the engine is one of
//! these, and `World::apply` is the only code that turns them into state.

use serde::{Deserialize, Serialize};

use crate::lifecycle::{FlowEvent, HookKind, LobbyAction, Phase};
use crate::model::{AttrChange, ChangeOp, ExitReason, ScopeRef, StageDef, StageEndReason, Value};
use crate::treatments::{BatchSpec, LobbyConfig, Treatment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AttrChange,
    LogEntry,
    HookFired,
    FlowTransition,
    LobbyEvent,
    ConnectionEvent,
    AdminAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    // attr_change
    Set {
        scope: ScopeRef,
        key: String,
        value: Value,
        version: u64,
        actor: String,
    },
    Append {
        scope: ScopeRef,
        key: String,
        element: Value,
        version: u64,
        actor: String,
    },
    Publish {
        game: String,
        key: String,
    },

    // log_entry
    Log {
        scope: ScopeRef,
        name: String,
        payload: Value,
        actor: String,
    },

    // hook_fired
    Hook {
        game: String,
        hook: HookKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        round: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stage: Option<usize>,
    },
    HookFailed {
        game: String,
        hook: HookKind,
        error: String,
    },

    // flow_transition
    PlayerPhase {
        player: String,
        from: Phase,
        to: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event: Option<FlowEvent>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<ExitReason>,
    },
    IntroStep {
        player: String,
        step: u32,
    },
    RoundAdded {
        game: String,
        round: usize,
        stages: Vec<StageDef>,
    },
    GameStarted {
        game: String,
        players: Vec<String>,
    },
    StageStarted {
        game: String,
        round: usize,
        stage: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deadline: Option<u64>,
    },
    Submitted {
        game: String,
        round: usize,
        stage: usize,
        player: String,
    },
    StageEnded {
        game: String,
        round: usize,
        stage: usize,
        reason: StageEndReason,
    },
    GameEnded {
        game: String,
    },
    GameCancelled {
        game: String,
        reason: String,
    },
    GamePaused {
        game: String,
        player: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        remaining_ms: Option<u64>,
    },
    GameResumed {
        game: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deadline: Option<u64>,
    },
    /// A player the pause was waiting for came back; others are still missing.
    PauseCleared {
        game: String,
        player: String,
    },
    RosterRemoved {
        game: String,
        player: String,
    },
    PlayerDropped {
        player: String,
    },
    BatchEnded {
        batch: String,
    },

    // lobby_event
    GameCreated {
        game: String,
        batch: String,
        treatment: Treatment,
        lobby: LobbyConfig,
    },
    LobbyJoined {
        game: String,
        player: String,
        position: usize,
    },
    LobbyLeft {
        game: String,
        player: String,
    },
    LobbyExtended {
        game: String,
    },
    LobbyTimedOut {
        game: String,
        action: LobbyAction,
    },
    Waitlisted {
        player: String,
    },

    // connection_event
    PlayerCreated {
        player: String,
        identifier: String,
        token_hash: String,
    },
    TokenRotated {
        player: String,
        token_hash: String,
    },
    Connected {
        player: String,
        resumed: bool,
    },
    Superseded {
        player: String,
    },
    Disconnected {
        player: String,
    },
    Liveness {
        player: String,
        state: crate::sync::Liveness,
    },

    // admin_action
    Startup {
        actor: String,
        config: Value,
    },
    ProtocolImported {
        actor: String,
        protocol: String,
        yaml: String,
        sha256: String,
    },
    BatchCreated {
        actor: String,
        batch: String,
        protocol: String,
        spec: BatchSpec,
    },
    BatchStarted {
        actor: String,
        batch: String,
    },
    BatchStopped {
        actor: String,
        batch: String,
    },
    GameTerminated {
        actor: String,
        game: String,
    },
    PlayerRetired {
        actor: String,
        player: String,
    },
    Exported {
        actor: String,
        batch: String,
        include_identifiers: bool,
    },
}

impl Event {
    pub fn kind(&self) -> EventKind {
        use Event::*;
        match self {
            Set { .. } | Append { .. } | Publish { .. } => EventKind::AttrChange,
            Log { .. } => EventKind::LogEntry,
            Hook { .. } | HookFailed { .. } => EventKind::HookFired,
            PlayerPhase { .. }
            | IntroStep { .. }
            | RoundAdded { .. }
            | GameStarted { .. }
            | StageStarted { .. }
            | Submitted { .. }
            | StageEnded { .. }
            | GameEnded { .. }
            | GameCancelled { .. }
            | GamePaused { .. }
            | GameResumed { .. }
            | PauseCleared { .. }
            | RosterRemoved { .. }
            | PlayerDropped { .. }
            | BatchEnded { .. } => EventKind::FlowTransition,
            GameCreated { .. }
            | LobbyJoined { .. }
            | LobbyLeft { .. }
            | LobbyExtended { .. }
            | LobbyTimedOut { .. }
            | Waitlisted { .. } => EventKind::LobbyEvent,
            PlayerCreated { .. }
            | TokenRotated { .. }
            | Connected { .. }
            | Superseded { .. }
            | Disconnected { .. }
            | Liveness { .. } => EventKind::ConnectionEvent,
            Startup { .. }
            | ProtocolImported { .. }
            | BatchCreated { .. }
            | BatchStarted { .. }
            | BatchStopped { .. }
            | GameTerminated { .. }
            | PlayerRetired { .. }
            | Exported { .. } => EventKind::AdminAction,
        }
    }

    pub fn from_change(change: &AttrChange) -> Self {
        match change.op {
            ChangeOp::Set => Event::Set {
                scope: change.scope.clone(),
                key: change.key.clone(),
                value: change.value.clone(),
                version: change.version,
                actor: change.actor.clone(),
            },
            ChangeOp::Append => Event::Append {
                scope: change.scope.clone(),
                key: change.key.clone(),
                element: change.value.clone(),
                version: change.version,
                actor: change.actor.clone(),
            },
        }
    }

    pub fn as_change(&self) -> Option<AttrChange> {
        match self {
            Event::Set {
                scope,
                key,
                value,
                version,
                actor,
            } => Some(AttrChange {
                scope: scope.clone(),
                key: key.clone(),
                op: ChangeOp::Set,
                value: value.clone(),
                version: *version,
                actor: actor.clone(),
            }),
            Event::Append {
                scope,
                key,
                element,
                version,
                actor,
            } => Some(AttrChange {
                scope: scope.clone(),
                key: key.clone(),
                op: ChangeOp::Append,
                value: element.clone(),
                version: *version,
                actor: actor.clone(),
            }),
            _ => None,
        }
    }
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub offset: u64,
    pub at: u64,
    pub kind: EventKind,
    pub body: Event,
}
