use std::collections::HashMap;

use csi_core::gateway::ScoreLabel;
use csi_core::preference::{OptionSet, PreferenceSnapshot, PreferenceState};
use csi_core::time::{Millis, ParticipantId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Pass {
    pub room: usize,
    pub dt: u64,
    pub labels: Vec<(usize, usize, i8)>,
}

/// Last write per (user, option) with its time and global order.
struct Oracle {
    cells: HashMap<(usize, usize), (i8, u64, usize)>,
}

impl Oracle {
    fn run(passes: &[Pass]) -> Oracle {
        let mut cells = HashMap::new();
        let mut t = 0;
        for (order, p) in passes.iter().enumerate() {
            t += p.dt;
            for &(u, o, s) in &p.labels {
                cells.insert((u, o), (s, t, order));
            }
        }
        Oracle { cells }
    }

    fn sum(&self, option: usize) -> i64 {
        self.cells.iter().filter(|((_, o), _)| *o == option).map(|(_, v)| v.0 as i64).sum()
    }

    /// Highest positive score, then most recent, then the smaller label.
    fn top(&self, user: usize, names: &[String]) -> Option<String> {
        let mut best: Option<(i8, u64, usize, usize)> = None;
        for (&(u, o), &(s, t, order)) in &self.cells {
            if u != user || s <= 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, bt, border, bo)) => {
                    (s, t, order) > (bs, bt, border) || ((s, t, order) == (bs, bt, border) && names[o] < names[bo])
                }
            };
            if better {
                best = Some((s, t, order, o));
            }
        }
        best.map(|b| names[b.3].clone())
    }
}

/// Merges `passes` into a fresh state and compares net preference, final
/// answer and every top choice with the brute-force table.
pub fn check(users: usize, options: usize, passes: &[Pass]) -> Result<(), String> {
    let ids: Vec<ParticipantId> = (0..users).map(|i| ParticipantId(format!("u{i}"))).collect();
    // Labels in reverse order so lexicographic and ordinal order differ.
    let names: Vec<String> = (0..options).map(|o| format!("opt{}", options - o)).collect();
    let mut state = PreferenceState::new(ids.clone(), OptionSet::new(names.clone()));
    let mut next_pass = HashMap::new();
    let mut t = 0;
    for p in passes {
        t += p.dt;
        let pass = next_pass.entry(p.room).or_insert(0u64);
        *pass += 1;
        let scores = p
            .labels
            .iter()
            .map(|&(u, o, s)| ScoreLabel {
                user: ids[u].clone(),
                option: names[o].clone(),
                score: s,
            })
            .collect();
        state
            .merge_snapshot(&PreferenceSnapshot {
                room_index: p.room,
                t: Millis(t),
                pass_index: *pass,
                scores,
            })
            .map_err(|e| e.to_string())?;
    }
    let oracle = Oracle::run(passes);

    let net = state.net_preference(Millis(t));
    for (o, name) in names.iter().enumerate() {
        let want = oracle.sum(o) as f64 / users as f64;
        if net.get(name) != Some(want) {
            return Err(format!("net {name}: {:?} vs {want}", net.get(name)));
        }
    }
    let best = (0..options)
        .max_by(|&a, &b| oracle.sum(a).cmp(&oracle.sum(b)).then_with(|| names[b].cmp(&names[a])))
        .unwrap();
    if state.final_answer().ok().as_ref() != Some(&names[best]) {
        return Err(format!("final answer {:?} vs {}", state.final_answer(), names[best]));
    }
    for (u, id) in ids.iter().enumerate() {
        if state.top_choice(id) != oracle.top(u, &names) {
            return Err(format!("top choice of {id}: {:?} vs {:?}", state.top_choice(id), oracle.top(u, &names)));
        }
    }
    Ok(())
}

/// A random table: up to 100 users, 10 options, 30 passes from 4 rooms.
pub fn random_case(seed: u64) -> (usize, usize, Vec<Pass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = rng.random_range(1..=100);
    let options = rng.random_range(1..=10);
    let passes = (0..rng.random_range(0..30))
        .map(|_| Pass {
            room: rng.random_range(0..4),
            dt: rng.random_range(0..3),
            labels: (0..rng.random_range(0..40))
                .map(|_| (rng.random_range(0..users), rng.random_range(0..options), rng.random_range(-3..=3)))
                .collect(),
        })
        .collect();
    (users, options, passes)
}
