//! Partitioning a population into deliberation rooms and wiring the relay ring.
//!
//! Rooms hold between [`MIN_ROOM_SIZE`] and [`MAX_ROOM_SIZE`] people and any
//! two rooms differ in size by at most one. Rooms are linked by a single
//! directed cycle: room `i` relays its summaries into room `(i + 1) % n`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::ParticipantId;

pub const MIN_ROOM_SIZE: usize = 4;
pub const MAX_ROOM_SIZE: usize = 7;
pub const DEFAULT_TARGET_ROOM_SIZE: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("population of {0} is below the minimum room size of {MIN_ROOM_SIZE}")]
    PopulationTooSmall(usize),
    #[error("target room size {0} is outside [{MIN_ROOM_SIZE}, {MAX_ROOM_SIZE}]")]
    BadTarget(usize),
    #[error("no room count places {0} people in rooms of {MIN_ROOM_SIZE} to {MAX_ROOM_SIZE}")]
    Infeasible(usize),
    #[error("expected {expected} participants, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("duplicate participant id {0}")]
    DuplicateParticipant(ParticipantId),
}

/// Room layout and relay overlay for one session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwarmTopology {
    pub population_size: usize,
    pub room_count: usize,
    pub room_sizes: Vec<usize>,
    /// `(source, destination)` pairs along which insight summaries flow.
    pub relay_edges: Vec<(usize, usize)>,
}

impl SwarmTopology {
    /// Builds a topology with explicit room sizes, wiring the ring.
    pub fn from_sizes(room_sizes: Vec<usize>) -> Result<Self, TopologyError> {
        let population_size: usize = room_sizes.iter().sum();
        if population_size < MIN_ROOM_SIZE {
            return Err(TopologyError::PopulationTooSmall(population_size));
        }
        let (min, max) = (
            room_sizes.iter().copied().min().unwrap_or(0),
            room_sizes.iter().copied().max().unwrap_or(0),
        );
        if min < MIN_ROOM_SIZE || max > MAX_ROOM_SIZE || max - min > 1 {
            return Err(TopologyError::Infeasible(population_size));
        }
        let room_count = room_sizes.len();
        Ok(SwarmTopology {
            population_size,
            room_count,
            room_sizes,
            relay_edges: ring_edges(room_count),
        })
    }

    /// The room whose summaries are relayed into `room`, if any.
    pub fn upstream_of(&self, room: usize) -> Option<usize> {
        self.relay_edges.iter().find(|(_, dst)| *dst == room).map(|(src, _)| *src)
    }

    /// The room that receives `room`'s summaries, if any.
    pub fn downstream_of(&self, room: usize) -> Option<usize> {
        self.relay_edges.iter().find(|(src, _)| *src == room).map(|(_, dst)| *dst)
    }

    /// Start offset of each room's slice in a shuffled roster.
    fn offsets(&self) -> Vec<usize> {
        self.room_sizes
            .iter()
            .scan(0, |acc, size| {
                let start = *acc;
                *acc += size;
                Some(start)
            })
            .collect()
    }
}

fn ring_edges(room_count: usize) -> Vec<(usize, usize)> {
    if room_count < 2 {
        return Vec::new();
    }
    (0..room_count).map(|i| (i, (i + 1) % room_count)).collect()
}

/// Balanced sizes for `n` rooms: the first `p % n` rooms get one extra person.
fn balanced_sizes(population: usize, rooms: usize) -> Vec<usize> {
    let base = population / rooms;
    let extra = population % rooms;
    (0..rooms).map(|i| if i < extra { base + 1 } else { base }).collect()
}

fn feasible(population: usize, rooms: usize) -> bool {
    let base = population / rooms;
    let ceil = base + usize::from(!population.is_multiple_of(rooms));
    base >= MIN_ROOM_SIZE && ceil <= MAX_ROOM_SIZE
}

/// Chooses the number of rooms for `population_size` people.
///
/// In order of preference:
/// 1. rooms of exactly `target_room_size` when the population divides evenly;
/// 2. the fewest rooms whose mean size rounds to the target, i.e.
///    `p / n` in `[target - 0.5, target + 0.5)`;
/// 3. the room count whose mean size is nearest the target, ties toward more
///    rooms.
///
/// Every candidate is restricted to balanced layouts with all sizes in
/// `[4, 7]`.
pub fn plan_topology(
    population_size: usize,
    target_room_size: usize,
) -> Result<SwarmTopology, TopologyError> {
    if population_size < MIN_ROOM_SIZE {
        return Err(TopologyError::PopulationTooSmall(population_size));
    }
    if !(MIN_ROOM_SIZE..=MAX_ROOM_SIZE).contains(&target_room_size) {
        return Err(TopologyError::BadTarget(target_room_size));
    }
    let p = population_size;
    let t = target_room_size;
    let candidates = (1..=p / MIN_ROOM_SIZE).filter(|&n| feasible(p, n));

    let exact = (p.is_multiple_of(t) && feasible(p, p / t)).then_some(p / t);
    // 2p in [(2t - 1) n, (2t + 1) n)  <=>  p / n in [t - 0.5, t + 0.5)
    let rounds_to_target = || {
        candidates
            .clone()
            .find(|&n| (2 * t - 1) * n <= 2 * p && 2 * p < (2 * t + 1) * n)
    };
    let nearest = || {
        // |p/n - t| compared exactly as |p - t n| / n, cross-multiplied.
        candidates.clone().min_by(|&a, &b| {
            let da = p.abs_diff(t * a) * b;
            let db = p.abs_diff(t * b) * a;
            da.cmp(&db).then(b.cmp(&a))
        })
    };
    let rooms = exact
        .or_else(rounds_to_target)
        .or_else(nearest)
        .ok_or(TopologyError::Infeasible(p))?;

    let room_sizes = balanced_sizes(p, rooms);
    Ok(SwarmTopology {
        population_size: p,
        room_count: rooms,
        room_sizes,
        relay_edges: ring_edges(rooms),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomAssignment {
    pub participant_id: ParticipantId,
    pub room_index: usize,
}

/// Shuffles the roster with a seeded RNG and slices it into rooms.
///
/// The returned list is in roster-slot order: room 0's members first.
pub fn assign_participants(
    participant_ids: &[ParticipantId],
    topology: &SwarmTopology,
    seed: u64,
) -> Result<Vec<RoomAssignment>, TopologyError> {
    if participant_ids.len() != topology.population_size {
        return Err(TopologyError::SizeMismatch {
            expected: topology.population_size,
            actual: participant_ids.len(),
        });
    }
    let mut seen = std::collections::HashSet::with_capacity(participant_ids.len());
    for id in participant_ids {
        if !seen.insert(id) {
            return Err(TopologyError::DuplicateParticipant(id.clone()));
        }
    }

    let mut shuffled = participant_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let mut out = Vec::with_capacity(shuffled.len());
    for (room, (start, size)) in topology.offsets().into_iter().zip(&topology.room_sizes).enumerate() {
        for id in &shuffled[start..start + size] {
            out.push(RoomAssignment {
                participant_id: id.clone(),
                room_index: room,
            });
        }
    }
    Ok(out)
}
