use serde::{Deserialize, Serialize};

use crate::treatments::{LobbyConfig, TimeoutStrategy};

/// Waiting room for one pending game.
///
/// `waiting_ms` is measured from when the lobby opened. The timeout clock
/// starts with the first arrival and restarts if the lobby empties.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LobbyState {
    pub opened_at: u64,
    pub first_arrival: Option<u64>,
    pub deadline: Option<u64>,
    pub extensions: u32,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LobbyStatus {
    pub waiting_ms: u64,
    pub players_present: u32,
    pub players_needed: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LobbyAction {
    None,
    Launch,
    TimeoutFail,
    TimeoutStartAnyway,
    TimeoutExtend,
}

impl LobbyState {
    pub fn open(now: u64) -> Self {
        Self {
            opened_at: now,
            ..Self::default()
        }
    }

    pub fn present(&self) -> u32 {
        self.members.len() as u32
    }

    pub fn status(&self, player_count: u32, now: u64) -> LobbyStatus {
        LobbyStatus {
            waiting_ms: now.saturating_sub(self.opened_at),
            players_present: self.present(),
            players_needed: player_count.saturating_sub(self.present()),
        }
    }

    /// Decides what the lobby should do at `now` without changing it.
    pub fn tick(&self, config: &LobbyConfig, player_count: u32, now: u64) -> LobbyAction {
        if self.present() >= player_count && player_count > 0 {
            return LobbyAction::Launch;
        }
        match self.deadline {
            Some(deadline) if now >= deadline && self.present() > 0 => match config.strategy {
                TimeoutStrategy::Fail => LobbyAction::TimeoutFail,
                TimeoutStrategy::StartAnyway => LobbyAction::TimeoutStartAnyway,
                TimeoutStrategy::Extend => {
                    if self.extensions < config.extend_limit.unwrap_or(0) {
                        LobbyAction::TimeoutExtend
                    } else {
                        LobbyAction::TimeoutFail
                    }
                }
            },
            _ => LobbyAction::None,
        }
    }

    pub fn join(&mut self, player: &str, config: &LobbyConfig, now: u64) {
        if self.members.is_empty() {
            self.first_arrival = Some(now);
            self.deadline = Some(now + u64::from(config.timeout) * 1000);
            self.extensions = 0;
        }
        self.members.push(player.to_string());
    }

    pub fn leave(&mut self, player: &str) {
        self.members.retain(|p| p != player);
        if self.members.is_empty() {
            self.first_arrival = None;
            self.deadline = None;
            self.extensions = 0;
        }
    }

    pub fn extend(&mut self, config: &LobbyConfig) {
        self.extensions += 1;
        if let Some(d) = self.deadline.as_mut() {
            *d += u64::from(config.timeout) * 1000;
        }
    }
}
