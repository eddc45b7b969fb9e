//! A token said in room 0 travels the relay ring one hop per observer batch
//! when, in every room, one participant repeats what the agent says.

use std::collections::BTreeMap;
use std::sync::Arc;

use csi_core::eventlog::Event;
use csi_core::gateway::Gateway;
use csi_core::message::AuthorKind;
use csi_core::runtime::{Outbound, Session, SessionConfig};
use csi_core::time::{Millis, ParticipantId};

pub const TOKEN: &str = "zq-7731-kestrel";

pub fn ring_session(duration_secs: u64) -> Session {
    let people: Vec<ParticipantId> = (0..75).map(|i| ParticipantId(format!("p{i:02}"))).collect();
    let config = SessionConfig::new("Q?", vec!["A".into()], people, Millis::from_secs(duration_secs));
    Session::create(config, Arc::new(Gateway::pass_through())).unwrap()
}

/// Steps the clock 100 ms at a time; each room's first member echoes every
/// agent message the moment it arrives. Returns when the token first
/// appeared in each room.
pub fn run(session: &mut Session, until: Millis, echo: bool) -> BTreeMap<usize, Millis> {
    let mut seen = BTreeMap::new();
    let mut t = session.now();
    while t < until {
        t = t + Millis(100);
        session.advance_to(t).unwrap();
        for out in session.drain_outbound() {
            let Outbound::Message(m) = out else { continue };
            if m.body.contains(TOKEN) {
                seen.entry(m.room_index).or_insert(m.t);
            }
            if echo && m.author_kind == AuthorKind::SurrogateAgent {
                let who = session.room_members(m.room_index)[0].clone();
                session.post_message(&who, &m.body).unwrap();
            }
        }
    }
    seen
}

/// Injects the token in room 0 and follows it around the 15-room ring.
/// Returns the number of relay cycles to reach each room.
pub fn cycles_to_each_room() -> Result<BTreeMap<usize, u64>, String> {
    let mut s = ring_session(600);
    if s.topology().room_count != 15 {
        return Err(format!("{} rooms", s.topology().room_count));
    }
    s.start().unwrap();
    s.advance_to(Millis(500)).unwrap();
    let origin = s.room_members(0)[1].clone();
    s.post_message(&origin, &format!("remember {TOKEN}")).unwrap();
    let seen = run(&mut s, Millis::from_secs(599), true);
    if seen.len() != 15 {
        return Err(format!("reached rooms {:?}", seen.keys().collect::<Vec<_>>()));
    }

    let window = s.config().settings.batcher.time_threshold;
    let quantum = s.config().settings.tick_quantum;
    for k in 1..15 {
        let gap = seen[&k] - seen[&(k - 1)];
        if gap < window || gap > window + quantum {
            return Err(format!("hop {k} took {gap}"));
        }
    }
    // Each first arrival is a relay from the previous room on the ring.
    let records = s.log().records();
    for k in 1..15usize {
        let first = s.room_messages(k).iter().find(|m| m.body.contains(TOKEN)).unwrap();
        if first.author_kind != AuthorKind::SurrogateAgent {
            return Err(format!("room {k} first heard the token from {}", first.author));
        }
        let from = records.iter().find_map(|r| match &r.event {
            Event::Relay(e) if e.to_room == k && e.room_seq == first.room_seq => Some(e.from_room),
            _ => None,
        });
        if from != Some(k - 1) {
            return Err(format!("room {k} got the token from {from:?}"));
        }
    }
    Ok(seen.iter().map(|(&k, &t)| (k, (t.0 - seen[&0].0) / window.0)).collect())
}
