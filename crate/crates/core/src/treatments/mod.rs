//! Experiment protocol files, factorial expansion and seat assignment.

mod assign;
mod factorial;
mod protocol;

pub use assign::{choose_seat, AssignError, Assignment, BatchAssigner, Seats};
pub use factorial::expand_factorial;
pub use protocol::{
    parse_protocol, serialize_protocol, AssignmentMethod, BatchSpec, Diagnostic, FactorDef, FactorType, LobbyConfig,
    Protocol, ProtocolError, Quota, TimeoutStrategy, Treatment, PLAYER_COUNT,
};
