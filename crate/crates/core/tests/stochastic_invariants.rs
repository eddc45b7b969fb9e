//! Invariants over sessions driven by stochastic bots and the keyword
//! scoring mock, one session per seed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use csi_core::eventlog::Event;
use csi_core::export::render_exports;
use csi_core::gateway::Gateway;
use csi_core::message::AuthorKind;
use csi_core::replay::replay_records;
use csi_core::runtime::{Outbound, Session, SessionConfig, SessionState};
use csi_core::script::{play, stochastic_bots};
use csi_core::time::{Millis, ParticipantId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn session_for(seed: u64) -> Session {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=40);
    let people: Vec<ParticipantId> = (0..n).map(|i| ParticipantId(format!("s{i:02}"))).collect();
    let options: Vec<String> = ["Oak", "Elm", "Ash", "Yew"].map(String::from).to_vec();
    let bots = stochastic_bots(&people, &options, rng.random_range(2.0..8.0), seed);
    let secs = rng.random_range(60..=200);
    let config = SessionConfig::new("Which tree?", options, people, Millis::from_secs(secs)).with_seed(seed);
    let mut session = Session::create(config, Arc::new(Gateway::heuristic())).unwrap();
    play(&mut session, &bots).unwrap();
    session
}

#[test]
fn hundred_seeds() {
    for seed in 0..100 {
        let mut s = session_for(seed);
        assert_eq!(s.state(), SessionState::Closed, "seed {seed}");
        let records = s.log().records().to_vec();

        // Log sequence is gapless and time never goes backwards.
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.seq, i as u64 + 1, "seed {seed}");
        }
        assert!(records.windows(2).all(|w| w[0].t <= w[1].t), "seed {seed}");

        let mut seqs: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        let mut humans: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
        let mut batched: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for r in &records {
            match &r.event {
                Event::Message(m) => {
                    seqs.entry(m.room_index).or_default().push(m.room_seq);
                    if m.is_human() {
                        // Room isolation: humans only speak in their own room.
                        assert_eq!(s.room_of(&m.author), Some(m.room_index), "seed {seed}");
                        humans.entry(m.room_index).or_default().insert(m.room_seq);
                    } else {
                        assert_eq!(m.author_kind, AuthorKind::SurrogateAgent);
                    }
                }
                Event::Batch(b) => batched.entry(b.room).or_default().extend(&b.room_seqs),
                Event::Snapshot(snap) => {
                    for l in &snap.labels {
                        assert!((-3..=3).contains(&l.score), "seed {seed}");
                        assert_eq!(s.room_of(&l.user), Some(snap.room), "seed {seed}");
                    }
                }
                Event::Insight(i) => {
                    for reason in &i.reasons {
                        assert!((1..=3).contains(&reason.conviction));
                        assert_eq!(s.room_of(&reason.author), Some(i.room), "seed {seed}");
                    }
                }
                _ => {}
            }
        }
        for (room, list) in &seqs {
            let want: Vec<u64> = (1..=list.len() as u64).collect();
            assert_eq!(list, &want, "seed {seed} room {room}");
        }
        // Every human message lands in exactly one batch, in order; nothing else does.
        for (room, list) in &batched {
            let want: Vec<u64> = humans[room].iter().copied().collect();
            assert_eq!(list, &want, "seed {seed} room {room}");
        }
        assert_eq!(batched.keys().collect::<Vec<_>>(), humans.keys().collect::<Vec<_>>());

        // The final answer is the argmax of the closing net preference, ties to the smaller label.
        let net = s.preferences().net_preference(s.now());
        let best = net
            .per_option
            .iter()
            .fold(None::<(&str, f64)>, |acc, o| match acc {
                Some((name, v)) if v > o.net || (v == o.net && name < o.option.as_str()) => acc,
                _ => Some((o.option.as_str(), o.net)),
            })
            .map(|(o, _)| o.to_owned());
        assert_eq!(s.final_answer().map(str::to_owned), best, "seed {seed}");

        assert_eq!(replay_records(&records).unwrap(), render_exports(s.record()), "seed {seed}");
        assert!(s.drain_outbound().iter().any(|o| matches!(o, Outbound::Closed { .. })));
    }
}
