//! Domain entities and the scoped, versioned attribute store.

mod entities;
mod scope;
mod store;

pub use entities::*;
pub use scope::{ScopeKind, ScopeRef};
pub use store::{AttrChange, Attribute, AttributeStore, ChangeOp, LogEntry, MAX_VALUE_BYTES};

/// Structured attribute value: null, bool, number, string, list or map.
pub type Value = serde_json::Value;

/// Actor id recorded for writes made by server-side code.
pub const SERVER_ACTOR: &str = "server";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("scope not found: {0}")]
    ScopeNotFound(String),
    #[error("game {0} is closed")]
    GameClosed(String),
    #[error("{key} on {scope} holds a non-list value")]
    TypeConflict { scope: String, key: String },
    #[error("attribute key must not be empty")]
    EmptyKey,
    #[error("value of {0} bytes exceeds the 256 KiB cap")]
    ValueTooLarge(usize),
    #[error("malformed scope reference: {0}")]
    MalformedScope(String),
    #[error("version gap on {scope}/{key}: expected {expected}, found {found}")]
    VersionGap {
        scope: String,
        key: String,
        expected: u64,
        found: u64,
    },
}

impl ModelError {
    /// Stable error code used on the wire and in CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::ScopeNotFound(_) | ModelError::MalformedScope(_) => "scope-not-found",
            ModelError::GameClosed(_) => "game-closed",
            ModelError::TypeConflict { .. } => "type-conflict",
            ModelError::EmptyKey => "bad-request",
            ModelError::ValueTooLarge(_) => "value-too-large",
            ModelError::VersionGap { .. } => "corrupt",
        }
    }
}

/// Orders generated ids ("p2" before "p10") by creation.
pub fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    (a.len(), a).cmp(&(b.len(), b))
}
