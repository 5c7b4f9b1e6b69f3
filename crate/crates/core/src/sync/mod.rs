//! Client/server wire protocol: frames, liveness, sessions and visibility.

mod session;
mod visibility;
mod wire;

pub use session::{heartbeat_check, new_token, token_hash, HeartbeatConfig, Liveness};
pub use visibility::{audience, can_see, visible_attributes};
pub use wire::*;
