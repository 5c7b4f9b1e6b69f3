//! Core of the vlab experiment platform: protocol files and treatment
//! assignment, the participant and game lifecycle, the attribute store and
//! its sync protocol, the event journal, export, and scripted bots.

pub mod bots;
pub mod engine;
pub mod events;
pub mod export;
pub mod journal;
pub mod lifecycle;
pub mod model;
pub mod state;
pub mod sync;
pub mod treatments;

pub use engine::{ConnId, Engine, EngineConfig, EngineError, GameCtx, Outbound};
pub use events::{Event, EventKind, EventRecord};
pub use journal::{FileBackend, Journal, JournalError, MemoryBackend};
pub use lifecycle::{Callbacks, GameLayout};
pub use state::World;
