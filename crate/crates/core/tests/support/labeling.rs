use std::sync::Arc;

use csi_core::eventlog::Event;
use csi_core::gateway::{Fallback, Gateway, MockBackend};
use csi_core::runtime::{Session, SessionConfig};
use csi_core::time::{Millis, ParticipantId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DURATION: u64 = 120_000;

pub fn session() -> Session {
    let people: Vec<ParticipantId> = (0..10).map(|i| ParticipantId(format!("p{i}"))).collect();
    let config = SessionConfig::new("Q?", vec!["A".into(), "B".into()], people, Millis(DURATION));
    let gateway = Arc::new(Gateway::new(MockBackend::new(Fallback::Neutral)));
    let mut s = Session::create(config, gateway).unwrap();
    s.start().unwrap();
    s
}

/// Pass times per room from message times alone.
pub fn oracle(posts: &[(u64, usize)], rooms: usize) -> Vec<(usize, u64)> {
    let mut unlabeled: Vec<Vec<u64>> = vec![Vec::new(); rooms];
    let mut passes = Vec::new();
    let mut tick = 0;
    let mut run_ticks = |until: u64, unlabeled: &mut Vec<Vec<u64>>, passes: &mut Vec<(usize, u64)>| {
        while tick <= until && tick < DURATION {
            for (room, pending) in unlabeled.iter_mut().enumerate() {
                if pending.first().is_some_and(|&oldest| tick - oldest >= 15_000) {
                    passes.push((room, tick));
                    pending.clear();
                }
            }
            tick += 1000;
        }
    };
    for &(t, room) in posts {
        run_ticks(t, &mut unlabeled, &mut passes);
        unlabeled[room].push(t);
        if unlabeled[room].len() == 5 {
            passes.push((room, t));
            unlabeled[room].clear();
        }
    }
    run_ticks(DURATION, &mut unlabeled, &mut passes);
    for (room, pending) in unlabeled.iter().enumerate() {
        if !pending.is_empty() {
            passes.push((room, DURATION));
        }
    }
    passes
}

/// (room, time) of every labeling pass the session ran.
pub fn observed(s: &Session) -> Vec<(usize, u64)> {
    s.log()
        .records()
        .iter()
        .filter_map(|r| match &r.event {
            Event::Snapshot(e) => Some((e.room, r.t.0)),
            _ => None,
        })
        .collect()
}

fn sorted(mut v: Vec<(usize, u64)>) -> Vec<(usize, u64)> {
    v.sort_by_key(|&(room, t)| (t, room));
    v
}

/// Bursts of quick messages separated by occasional long silences; the
/// observed passes must equal the oracle's and nothing may wait past 16 s.
pub fn check_schedule(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = session();
    let rooms = s.topology().room_count;
    let mut t = 0u64;
    let mut posts = Vec::new();
    loop {
        t += if rng.random_bool(0.15) { rng.random_range(10_000..40_000) } else { rng.random_range(0..4_000) };
        if t >= DURATION {
            break;
        }
        let room = rng.random_range(0..rooms);
        let members = s.room_members(room).to_vec();
        let who = &members[rng.random_range(0..members.len())];
        s.advance_to(Millis(t)).unwrap();
        s.post_message(who, "hello there").unwrap();
        posts.push((t, room));
    }
    s.advance_to(Millis(DURATION)).unwrap();
    let want = sorted(oracle(&posts, rooms));
    let got = sorted(observed(&s));
    if want != got {
        return Err(format!("seed {seed}: expected {want:?}, got {got:?}"));
    }
    for &(pt, room) in &posts {
        let labeled = got.iter().find(|&&(r, at)| r == room && at >= pt).map(|&(_, at)| at);
        if !labeled.is_some_and(|at| at <= (pt + 16_000).min(DURATION)) {
            return Err(format!("seed {seed}: message at {pt} in room {room} waited too long"));
        }
    }
    Ok(())
}

/// Four messages do nothing; the fifth fires a pass at its own timestamp.
pub fn check_fifth_message() -> Result<(), String> {
    let mut s = session();
    let members = s.room_members(0).to_vec();
    for (i, t) in [1000, 1200, 1700, 3100].into_iter().enumerate() {
        s.advance_to(Millis(t)).unwrap();
        s.post_message(&members[i % members.len()], "hi").unwrap();
    }
    if !observed(&s).is_empty() {
        return Err(format!("pass before the fifth message: {:?}", observed(&s)));
    }
    s.advance_to(Millis(4250)).unwrap();
    s.post_message(&members[0], "fifth").unwrap();
    if observed(&s) != vec![(0, 4250)] || s.unlabeled_count(0) != 0 {
        return Err(format!("fifth message gave {:?}", observed(&s)));
    }
    Ok(())
}

/// A lone message is labeled between 15 and 16 s after it was posted.
pub fn check_lone_message() -> Result<(), String> {
    for offset in [0u64, 1, 250, 500, 999] {
        let mut s = session();
        let who = s.room_members(1)[0].clone();
        let posted = 2000 + offset;
        s.advance_to(Millis(posted)).unwrap();
        s.post_message(&who, "anyone?").unwrap();
        s.advance_to(Millis(posted + 14_000)).unwrap();
        if !observed(&s).is_empty() {
            return Err(format!("offset {offset}: labeled before 14 s"));
        }
        s.advance_to(Millis(posted + 16_000)).unwrap();
        let passes = observed(&s);
        let waited = passes.first().map(|p| p.1 - posted);
        if passes.len() != 1 || !waited.is_some_and(|w| (15_000..=16_000).contains(&w)) {
            return Err(format!("offset {offset}: passes {passes:?}"));
        }
    }
    Ok(())
}
