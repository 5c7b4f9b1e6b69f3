use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::protocol::AssignmentMethod;

/// Where an arriving player ends up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Slot { game: usize, position: usize },
    Waitlisted,
}

/// Fill state of one game slot as seen by the assigner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seats {
    pub capacity: u32,
    pub filled: u32,
    /// False once the game launched, was cancelled, or otherwise stopped
    /// taking players.
    pub open: bool,
}

impl Seats {
    fn has_room(&self) -> bool {
        self.open && self.filled < self.capacity
    }
}

/// Picks a seat for arrival number `arrival` (0-based).
///
/// `Complete` takes the first game with room in quota order. `Simple` picks
/// uniformly among games with room; the draw for each arrival comes from its
/// own ChaCha stream under `seed`, so it depends only on `(seed, arrival)`.
pub fn choose_seat(method: AssignmentMethod, seats: &[Seats], seed: u64, arrival: u64) -> Assignment {
    let open: Vec<usize> = seats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.has_room())
        .map(|(i, _)| i)
        .collect();
    let Some(&first) = open.first() else {
        return Assignment::Waitlisted;
    };
    let game = match method {
        AssignmentMethod::Complete => first,
        AssignmentMethod::Simple => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(arrival);
            open[rng.random_range(0..open.len())]
        }
    };
    Assignment::Slot {
        game,
        position: seats[game].filled as usize,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssignError {
    #[error("batch is not running")]
    BatchClosed,
    #[error("player {0} already holds a seat")]
    AlreadySeated(String),
}

/// Standalone seat bookkeeping for one batch. The engine drives the same
/// `choose_seat` rule from its own state; this type serves tools and tests
/// that only need the assignment behaviour.
#[derive(Debug, Clone)]
pub struct BatchAssigner {
    method: AssignmentMethod,
    seed: u64,
    seats: Vec<Seats>,
    arrivals: u64,
    running: bool,
    placed: BTreeMap<String, (usize, usize)>,
}

impl BatchAssigner {
    /// One game per entry of `capacities` (playerCount per game, quota order).
    pub fn new(method: AssignmentMethod, seed: u64, capacities: &[u32]) -> Self {
        Self {
            method,
            seed,
            seats: capacities
                .iter()
                .map(|&capacity| Seats {
                    capacity,
                    filled: 0,
                    open: true,
                })
                .collect(),
            arrivals: 0,
            running: true,
            placed: BTreeMap::new(),
        }
    }

    pub fn close(&mut self) {
        self.running = false;
    }

    pub fn assign_player(&mut self, player: &str) -> Result<Assignment, AssignError> {
        if !self.running {
            return Err(AssignError::BatchClosed);
        }
        if self.placed.contains_key(player) {
            return Err(AssignError::AlreadySeated(player.to_string()));
        }
        let a = choose_seat(self.method, &self.seats, self.seed, self.arrivals);
        self.arrivals += 1;
        if let Assignment::Slot { game, position } = a {
            self.seats[game].filled += 1;
            self.placed.insert(player.to_string(), (game, position));
        }
        Ok(a)
    }

    pub fn seats(&self) -> &[Seats] {
        &self.seats
    }
}
