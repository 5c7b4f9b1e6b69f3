//! Participant flow, lobbies, the hook grammar and disconnect policies.

mod callbacks;
mod flow;
mod hooks;
mod layout;
mod lobby;
mod policy;

pub use callbacks::{CallbackError, CallbackResult, Callbacks, ChangeNotice};
pub use flow::{advance_flow, FlowEvent, FlowViolation, Phase, PlayerFlowState};
pub use hooks::{check_hook_trace, HookKind, HookRecord, TraceShape};
pub use layout::{GameLayout, LayoutError, RoundLayout};
pub use lobby::{LobbyAction, LobbyState, LobbyStatus};
pub use policy::{DisconnectAction, DisconnectMode, DisconnectPolicy, DEFAULT_GRACE_S};
