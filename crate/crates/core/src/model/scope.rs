use std::fmt;

use serde::{Deserialize, Serialize};

/// The construct an attribute is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    Game,
    Player,
    Round,
    Stage,
    PlayerRound,
    PlayerStage,
}

impl ScopeKind {
    pub const ALL: [ScopeKind; 6] = [
        ScopeKind::Game,
        ScopeKind::Player,
        ScopeKind::Round,
        ScopeKind::Stage,
        ScopeKind::PlayerRound,
        ScopeKind::PlayerStage,
    ];

    pub fn is_composite(self) -> bool {
        matches!(self, ScopeKind::PlayerRound | ScopeKind::PlayerStage)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScopeKind::Game => "game",
            ScopeKind::Player => "player",
            ScopeKind::Round => "round",
            ScopeKind::Stage => "stage",
            ScopeKind::PlayerRound => "player_round",
            ScopeKind::PlayerStage => "player_stage",
        }
    }
}

impl fmt::Display for ScopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference to a scope. Composite kinds name the round or stage in `id`
/// and the player in `player`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScopeRef {
    pub kind: ScopeKind,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub player: Option<String>,
}

impl ScopeRef {
    pub fn game(id: impl Into<String>) -> Self {
        Self::simple(ScopeKind::Game, id)
    }

    pub fn player(id: impl Into<String>) -> Self {
        Self::simple(ScopeKind::Player, id)
    }

    pub fn round(id: impl Into<String>) -> Self {
        Self::simple(ScopeKind::Round, id)
    }

    pub fn stage(id: impl Into<String>) -> Self {
        Self::simple(ScopeKind::Stage, id)
    }

    pub fn player_round(round: impl Into<String>, player: impl Into<String>) -> Self {
        Self {
            kind: ScopeKind::PlayerRound,
            id: round.into(),
            player: Some(player.into()),
        }
    }

    pub fn player_stage(stage: impl Into<String>, player: impl Into<String>) -> Self {
        Self {
            kind: ScopeKind::PlayerStage,
            id: stage.into(),
            player: Some(player.into()),
        }
    }

    fn simple(kind: ScopeKind, id: impl Into<String>) -> Self {
        Self {
            kind,
            id: id.into(),
            player: None,
        }
    }

    /// Composite kinds carry a player; the others must not.
    pub fn is_well_formed(&self) -> bool {
        !self.id.is_empty() && self.kind.is_composite() == self.player.is_some()
    }
}

impl fmt::Display for ScopeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.player {
            Some(p) => write!(f, "{}:{}:{}", self.kind, self.id, p),
            None => write!(f, "{}:{}", self.kind, self.id),
        }
    }
}
