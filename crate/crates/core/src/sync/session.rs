use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Alive,
    Stale,
    Dead,
}

/// Heartbeat parameters. Defaults: 5 s interval, 3 missed intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatConfig {
    pub interval_ms: u64,
    pub misses_allowed: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            interval_ms: 5_000,
            misses_allowed: 3,
        }
    }
}

/// Classifies a session by the silence since its last inbound frame: stale
/// once one interval has passed, dead once `misses_allowed` intervals have.
pub fn heartbeat_check(last_seen: u64, now: u64, interval_ms: u64, misses_allowed: u32) -> Liveness {
    let silence = now.saturating_sub(last_seen);
    if silence >= interval_ms.saturating_mul(u64::from(misses_allowed.max(1))) {
        Liveness::Dead
    } else if silence >= interval_ms {
        Liveness::Stale
    } else {
        Liveness::Alive
    }
}

/// 256-bit random session token, hex encoded.
pub fn new_token(rng: &mut impl RngCore) -> String {
    let mut bytes = [0u8; 32];
    rng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

pub fn token_hash(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}
