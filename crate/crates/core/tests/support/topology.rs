use std::collections::VecDeque;

use csi_core::topology::{plan_topology, SwarmTopology, DEFAULT_TARGET_ROOM_SIZE};

/// Every room reaches every other room along the directed relay edges.
pub fn strongly_connected(t: &SwarmTopology) -> bool {
    let reach = |reverse: bool| {
        let mut seen = vec![false; t.room_count];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(r) = queue.pop_front() {
            for &(a, b) in &t.relay_edges {
                let (from, to) = if reverse { (b, a) } else { (a, b) };
                if from == r && !seen[to] {
                    seen[to] = true;
                    queue.push_back(to);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(false) && reach(true)
}

pub fn check_population(p: usize) -> Result<(), String> {
    let t = plan_topology(p, DEFAULT_TARGET_ROOM_SIZE).map_err(|e| format!("p={p}: {e}"))?;
    let (min, max) = (*t.room_sizes.iter().min().unwrap(), *t.room_sizes.iter().max().unwrap());
    if t.room_sizes.iter().sum::<usize>() != p || t.room_sizes.len() != t.room_count {
        return Err(format!("p={p}: sizes {:?}", t.room_sizes));
    }
    if !(4..=7).contains(&min) || !(4..=7).contains(&max) || max - min > 1 {
        return Err(format!("p={p}: sizes {:?}", t.room_sizes));
    }
    if t.relay_edges.len() != t.room_count || !strongly_connected(&t) {
        return Err(format!("p={p}: relay ring {:?}", t.relay_edges));
    }
    Ok(())
}

/// 81 people: 15 rooms, nine of 5 and six of 6, on a ring.
pub fn check_eighty_one() -> Result<(), String> {
    let t = plan_topology(81, DEFAULT_TARGET_ROOM_SIZE).map_err(|e| e.to_string())?;
    let fives = t.room_sizes.iter().filter(|&&s| s == 5).count();
    let sixes = t.room_sizes.iter().filter(|&&s| s == 6).count();
    let ring: Vec<(usize, usize)> = (0..15).map(|i| (i, (i + 1) % 15)).collect();
    if t.room_count != 15 || fives != 9 || sixes != 6 || t.relay_edges != ring {
        return Err(format!("81 -> {} rooms {:?}", t.room_count, t.room_sizes));
    }
    Ok(())
}
