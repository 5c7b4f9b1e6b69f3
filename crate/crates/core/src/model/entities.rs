use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::lifecycle::{LobbyState, Phase};
use crate::treatments::{BatchSpec, LobbyConfig, Protocol, Treatment};

/// Why a player left the flow for the outro.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    Completed,
    LobbyTimeout,
    Cancelled,
    Custom,
    Terminated,
}

impl ExitReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitReason::Completed => "completed",
            ExitReason::LobbyTimeout => "lobby_timeout",
            ExitReason::Cancelled => "cancelled",
            ExitReason::Custom => "custom",
            ExitReason::Terminated => "terminated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayerStatus {
    New,
    Intro,
    Lobby,
    Playing,
    Exited,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Player {
    pub id: String,
    /// External recruitment-source id. Never exported by default.
    pub identifier: String,
    /// SHA-256 of the session token; the token itself is never stored.
    pub token_hash: String,
    pub phase: Phase,
    pub intro_step: Option<u32>,
    pub dropped: bool,
    pub exit_reason: Option<ExitReason>,
    pub current_game: Option<String>,
    pub batch: Option<String>,
    pub retired: bool,
}

impl Player {
    pub fn status(&self) -> PlayerStatus {
        if self.dropped {
            return PlayerStatus::Dropped;
        }
        match self.phase {
            Phase::Consent => PlayerStatus::New,
            Phase::Intro => PlayerStatus::Intro,
            Phase::Lobby => PlayerStatus::Lobby,
            Phase::Game => PlayerStatus::Playing,
            Phase::Outro | Phase::Exited => PlayerStatus::Exited,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameStatus {
    Pending,
    Running,
    Paused,
    Ended,
    Cancelled,
}

impl GameStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, GameStatus::Ended | GameStatus::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GameStatus::Pending => "pending",
            GameStatus::Running => "running",
            GameStatus::Paused => "paused",
            GameStatus::Ended => "ended",
            GameStatus::Cancelled => "cancelled",
        }
    }
}

/// Position of a game in its round/stage structure. Ordered so that the
/// cursor can only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cursor {
    PreStart,
    At { round: usize, stage: usize },
    Ended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEndReason {
    AllSubmitted,
    Timer,
    Policy,
}

/// Declared shape of a stage before it is instantiated in a game.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDef {
    pub name: String,
    /// Seconds; absent means the stage only ends by submission or server logic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<u32>,
    /// End the stage as soon as every active player has submitted.
    #[serde(default)]
    pub submit_advance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub id: String,
    pub index: usize,
    pub name: String,
    pub duration: Option<u32>,
    pub submit_advance: bool,
    pub submitted: BTreeSet<String>,
    pub started_at: Option<u64>,
    pub deadline: Option<u64>,
    pub ended: Option<StageEndReason>,
    pub ended_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub id: String,
    pub index: usize,
    pub stages: Vec<Stage>,
}

pub fn round_id(game: &str, round: usize) -> String {
    format!("{game}-r{round}")
}

pub fn stage_id(game: &str, round: usize, stage: usize) -> String {
    format!("{game}-r{round}-s{stage}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauseState {
    /// Stage time left when the pause began, if the stage is timed.
    pub remaining_ms: Option<u64>,
    /// Players whose absence caused the pause.
    pub waiting_for: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Game {
    pub id: String,
    pub batch_id: String,
    pub treatment: Treatment,
    pub lobby_config: LobbyConfig,
    pub lobby: LobbyState,
    /// Roster fixed at start.
    pub player_ids: Vec<String>,
    /// Players still taking part; shrinks only under continue-without.
    pub active: BTreeSet<String>,
    pub rounds: Vec<Round>,
    pub cursor: Cursor,
    pub status: GameStatus,
    pub public_keys: BTreeSet<String>,
    pub paused: Option<PauseState>,
    pub end_reason: Option<String>,
}

impl Game {
    pub fn player_count(&self) -> u32 {
        self.treatment.player_count()
    }

    pub fn current_stage(&self) -> Option<&Stage> {
        match self.cursor {
            Cursor::At { round, stage } => self.rounds.get(round)?.stages.get(stage),
            _ => None,
        }
    }

    pub fn stage_at(&self, round: usize, stage: usize) -> Option<&Stage> {
        self.rounds.get(round)?.stages.get(stage)
    }

    pub fn is_member(&self, player: &str) -> bool {
        self.player_ids.iter().any(|p| p == player)
    }

    pub fn is_live(&self) -> bool {
        matches!(self.status, GameStatus::Running | GameStatus::Paused)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    Created,
    Running,
    Ended,
    Terminated,
}

impl BatchStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, BatchStatus::Ended | BatchStatus::Terminated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub id: String,
    pub protocol_id: String,
    pub spec: BatchSpec,
    pub status: BatchStatus,
    pub games: Vec<String>,
    /// Number of assignment draws made so far (seeds the simple method).
    pub arrivals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredProtocol {
    pub id: String,
    pub yaml: String,
    pub sha256: String,
    pub protocol: Protocol,
}
