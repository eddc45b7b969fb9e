//! The 81-participant acceptance fixture.
//!
//! Fifteen rooms talk in bursts of five messages every 20 s for 400 s, so
//! every burst triggers exactly one labeling pass and every two bursts one
//! observer batch. A scripted mock gateway answers each pass and batch with
//! hand-designed labels and reasons:
//!
//! * reasons: 206 for / 54 against the leader, 266 / 144 / 410 overall,
//!   argued by 62 and 24 distinct participants;
//! * top choices: 60 leader supporters once everyone has spoken, 55 at the
//!   close, with 10 / 7 / 6 / 3 for the rivals;
//! * period means with the leader ahead by more than 1.3 throughout.
//!
//! Candidate names are fictional.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::Polarity;
use crate::analytics::default_periods;
use crate::gateway::{Gateway, MockBackend, RequestKind, ScriptLine, ScriptParseError};
use crate::runtime::{SessionConfig, SessionSettings};
use crate::script::{load_scripts, scripts_to_jsonl, BotScript, ScriptError, Utterance};
use crate::time::{Millis, ParticipantId};
use crate::topology::{assign_participants, plan_topology, DEFAULT_TARGET_ROOM_SIZE};

pub const OPTIONS: [&str; 6] = ["Delgado", "Hartley", "Pruitt", "Ravel", "Castell", "Sutter"];
pub const LEADER: &str = "Delgado";
pub const PARTICIPANTS: usize = 81;
pub const DURATION: Millis = Millis::from_secs(400);
pub const SEED: u64 = 7;
pub const SESSION_ID: &str = "fixture-81";
pub const QUESTION: &str = "Which candidate would a representative sample of voters be most likely to choose?";

pub const SESSION_FILE: &str = "session.json";
pub const BOTS_FILE: &str = "bots.jsonl";
pub const GATEWAY_FILE: &str = "gateway.jsonl";

const BURSTS: usize = 20;
const BURST_LEN: usize = 5;
const BATCHES: usize = BURSTS / 2;

const D: usize = 0;
const H: usize = 1;
const P: usize = 2;
const R: usize = 3;
const C: usize = 4;
const S: usize = 5;

/// Session parameters stored next to the scripts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSession {
    pub session_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub seed: u64,
    pub duration: Millis,
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub session: FixtureSession,
    pub bots: Vec<BotScript>,
    pub gateway: Vec<ScriptLine>,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixture: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad {SESSION_FILE}: {0}")]
    Session(#[from] serde_json::Error),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Gateway(#[from] ScriptParseError),
}

impl Fixture {
    pub fn participants(&self) -> Vec<ParticipantId> {
        self.bots.iter().map(|b| b.bot.clone()).collect()
    }

    pub fn config(&self) -> SessionConfig {
        SessionConfig {
            session_id: self.session.session_id.clone(),
            question: self.session.question.clone(),
            options: self.session.options.clone(),
            participants: self.participants(),
            duration: self.session.duration,
            seed: self.session.seed,
            periods: default_periods(),
            settings: SessionSettings::default(),
        }
    }

    pub fn gateway(&self) -> Arc<Gateway> {
        Arc::new(Gateway::new(MockBackend::scripted(self.gateway.clone())))
    }

    pub fn gateway_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.gateway {
            out.push_str(&serde_json::to_string(line).expect("script lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut session = serde_json::to_string_pretty(&self.session).expect("session serializes");
        session.push('\n');
        std::fs::write(dir.join(SESSION_FILE), session)?;
        std::fs::write(dir.join(BOTS_FILE), scripts_to_jsonl(&self.bots))?;
        std::fs::write(dir.join(GATEWAY_FILE), self.gateway_jsonl())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let dir = dir.as_ref();
        let session = serde_json::from_str(&std::fs::read_to_string(dir.join(SESSION_FILE))?)?;
        let bots = load_scripts(dir.join(BOTS_FILE))?;
        let text = std::fs::read_to_string(dir.join(GATEWAY_FILE))?;
        let mut gateway = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            gateway.push(serde_json::from_str(raw).map_err(|e| ScriptParseError::Line {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Fixture { session, bots, gateway })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Loyal,
    LeaderToRavel,
    LeaderToHartley,
    Ravel,
    Hartley,
    Pruitt,
    Castell,
    UndecidedToRavel,
    UndecidedToHartley,
    UndecidedToPruitt,
}

const ROLES: [(Role, usize); 10] = [
    (Role::Loyal, 55),
    (Role::LeaderToRavel, 3),
    (Role::LeaderToHartley, 2),
    (Role::Ravel, 5),
    (Role::Hartley, 4),
    (Role::Pruitt, 4),
    (Role::Castell, 3),
    (Role::UndecidedToRavel, 2),
    (Role::UndecidedToHartley, 1),
    (Role::UndecidedToPruitt, 2),
];

/// Score changes for one participant; `initial` is sent the first time they
/// speak, each later entry at their first pass at or after `from_pass`.
#[derive(Default)]
struct Plan {
    initial: Vec<(usize, i8)>,
    changes: Vec<(u64, Vec<(usize, i8)>)>,
    /// Reasons in the order they are voiced.
    reasons: Vec<(usize, Polarity)>,
}

fn plans() -> Vec<Plan> {
    let mut roles = Vec::with_capacity(PARTICIPANTS);
    for (role, count) in ROLES {
        roles.extend(std::iter::repeat_n(role, count));
    }
    let mut plans: Vec<Plan> = roles.iter().map(|_| Plan::default()).collect();
    let loyal: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == Role::Loyal).collect();
    let of = |role: Role| -> Vec<usize> { (0..roles.len()).filter(|&i| roles[i] == role).collect() };

    // Opening stances.
    for (k, &u) in loyal.iter().enumerate() {
        let mut initial = vec![(D, if k < 33 { 3 } else { 2 })];
        match k {
            0..=3 => initial.push((H, 1)),
            4 => initial.push((P, 1)),
            5..=7 => initial.push((R, 1)),
            40 | 41 => initial.push((S, 1)),
            _ => {}
        }
        plans[u].initial = initial;
    }
    for u in of(Role::LeaderToRavel) {
        plans[u].initial = vec![(D, 2), (R, 1)];
    }
    for u in of(Role::LeaderToHartley) {
        plans[u].initial = vec![(D, 2), (H, 1)];
    }
    for u in of(Role::Ravel) {
        plans[u].initial = vec![(R, 2), (D, -1)];
    }
    for u in of(Role::Hartley) {
        plans[u].initial = vec![(H, 3)];
    }
    for u in of(Role::Pruitt) {
        plans[u].initial = vec![(P, 3), (D, -1)];
    }
    for u in of(Role::Castell) {
        plans[u].initial = vec![(C, 2), (D, -1)];
    }
    for u in of(Role::UndecidedToPruitt) {
        plans[u].initial = vec![(D, -1)];
    }

    // Switches during deliberation.
    for (i, u) in of(Role::LeaderToRavel).into_iter().enumerate() {
        plans[u].changes.push((9 + i as u64, vec![(D, 0), (R, 3)]));
    }
    for (i, u) in of(Role::LeaderToHartley).into_iter().enumerate() {
        plans[u].changes.push((12 + i as u64, vec![(D, 1), (H, 3)]));
    }
    for (i, u) in of(Role::UndecidedToRavel).into_iter().enumerate() {
        plans[u].changes.push((10 + 2 * i as u64, vec![(R, 2)]));
    }
    for u in of(Role::UndecidedToHartley) {
        plans[u].changes.push((11, vec![(H, 2)]));
    }
    for (i, u) in of(Role::UndecidedToPruitt).into_iter().enumerate() {
        plans[u].changes.push((13 + i as u64, vec![(D, 0), (P, 2)]));
    }
    // Loyal supporters sour on rivals without changing their top choice.
    let mut sour = |users: std::ops::Range<usize>, option: usize, first_pass: u64, spread: u64| {
        for (j, k) in users.enumerate() {
            plans[loyal[k]].changes.push((first_pass + j as u64 % spread, vec![(option, -1)]));
        }
    };
    sour(10..18, H, 7, 8);
    sour(25..48, P, 8, 7);
    sour(20..55, R, 6, 10);
    sour(0..15, C, 9, 6);
    sour(45..51, S, 10, 5);

    // Reasons. 206 for the leader from 62 people: 20 give four, 42 give three.
    let mut favor_leader: Vec<usize> = Vec::new();
    favor_leader.extend(&loyal);
    favor_leader.extend(of(Role::LeaderToRavel));
    favor_leader.extend(of(Role::LeaderToHartley));
    favor_leader.extend(of(Role::UndecidedToRavel));
    for (k, &u) in favor_leader.iter().enumerate() {
        let n = if k < 20 { 4 } else { 3 };
        plans[u].reasons.extend(std::iter::repeat_n((D, Polarity::InFavor), n));
    }
    // 54 against the leader from 24 people: 6 give three, 18 give two.
    let mut against_leader: Vec<usize> = Vec::new();
    for role in [
        Role::Ravel,
        Role::Hartley,
        Role::Pruitt,
        Role::Castell,
        Role::UndecidedToRavel,
        Role::UndecidedToHartley,
        Role::UndecidedToPruitt,
        Role::LeaderToRavel,
    ] {
        against_leader.extend(of(role));
    }
    for (k, &u) in against_leader.iter().enumerate() {
        let n = if k < 6 { 3 } else { 2 };
        plans[u].reasons.extend(std::iter::repeat_n((D, Polarity::Against), n));
    }
    let mut give = |users: Vec<usize>, option: usize, polarity: Polarity, counts: &dyn Fn(usize) -> usize| {
        for (k, u) in users.into_iter().enumerate() {
            plans[u].reasons.extend(std::iter::repeat_n((option, polarity), counts(k)));
        }
    };
    let hartley_fans = [of(Role::Hartley), of(Role::LeaderToHartley), of(Role::UndecidedToHartley)].concat();
    give(hartley_fans, H, Polarity::InFavor, &|_| 4);
    give(loyal[10..29].to_vec(), H, Polarity::Against, &|_| 1);
    give([of(Role::Pruitt), of(Role::UndecidedToPruitt)].concat(), P, Polarity::InFavor, &|k| if k < 4 { 3 } else { 2 });
    give(loyal[25..55].to_vec(), P, Polarity::Against, &|_| 1);
    let ravel_fans = [of(Role::Ravel), of(Role::LeaderToRavel), of(Role::UndecidedToRavel)].concat();
    give(ravel_fans, R, Polarity::InFavor, &|k| if k == 0 { 2 } else { 1 });
    give(loyal[20..55].to_vec(), R, Polarity::Against, &|_| 1);
    give(of(Role::Castell), C, Polarity::InFavor, &|_| 1);
    give(loyal[0..6].to_vec(), C, Polarity::Against, &|_| 1);
    give(vec![loyal[40], loyal[41]], S, Polarity::InFavor, &|_| 1);
    plans
}

const FAVOR_TEXT: [&[&str]; 6] = [
    &[
        "has the strongest name recognition of anyone running",
        "runs a large state and has a record to point to",
        "appeals to younger voters",
        "has the biggest donor base",
        "is the most electable in a general election",
        "comes across as tough and decisive",
        "would pull in independents",
    ],
    &[
        "has real foreign policy experience",
        "is a fresh face with broad appeal",
        "handles debates well",
        "can reach moderate voters",
    ],
    &["is steady and experienced", "has a long record in national office", "is trusted by the base"],
    &["is an energetic outsider", "has new ideas on the economy", "connects with younger voters online"],
    &["is willing to say hard things", "has a strong debate style"],
    &["is likeable and positive", "has an inspiring personal story"],
];

const AGAINST_TEXT: [&[&str]; 6] = [
    &[
        "is too polarizing for moderates",
        "struggles with retail politics",
        "has a divisive record at home",
        "seems to be losing momentum",
        "would not win outside the base",
    ],
    &["has little name recognition", "seems to shift positions", "lacks a clear base"],
    &["carries too much baggage", "cannot excite new voters", "is seen as a figure of the past"],
    &["is too inexperienced", "takes radical positions", "has no record in office"],
    &["alienates most of the base", "has no path through the primary"],
    &[],
];

fn reason_text(option: usize, polarity: Polarity, n: usize) -> String {
    let bank = match polarity {
        Polarity::InFavor => FAVOR_TEXT[option],
        Polarity::Against => AGAINST_TEXT[option],
    };
    format!("{} {}", OPTIONS[option], bank[n % bank.len()])
}

const CHATTER: [&str; 6] = [
    "good point",
    "I hear you",
    "not sure yet, tell me more",
    "that is fair",
    "what do the rest of you think?",
    "interesting",
];

fn narrative(reasons: &[(usize, Polarity)]) -> String {
    let mut favor = BTreeMap::<usize, usize>::new();
    let mut against = BTreeMap::<usize, usize>::new();
    for (o, p) in reasons {
        *match p {
            Polarity::InFavor => &mut favor,
            Polarity::Against => &mut against,
        }
        .entry(*o)
        .or_default() += 1;
    }
    let top = |m: &BTreeMap<usize, usize>| m.iter().max_by_key(|(o, n)| (**n, std::cmp::Reverse(**o))).map(|(o, _)| *o);
    match (top(&favor), top(&against)) {
        (Some(f), Some(a)) => format!(
            "I was talking with another group: most of us lean toward {}, though some have doubts about {}.",
            OPTIONS[f], OPTIONS[a]
        ),
        (Some(f), None) => format!("I was talking with another group: most of us lean toward {}.", OPTIONS[f]),
        (None, Some(a)) => format!("I was talking with another group: several of us have doubts about {}.", OPTIONS[a]),
        (None, None) => String::new(),
    }
}

/// Builds the fixture from scratch. Deterministic.
pub fn scripted_fixture() -> Fixture {
    let participants: Vec<ParticipantId> =
        (1..=PARTICIPANTS).map(|i| ParticipantId::new(format!("p{i:02}"))).collect();
    let topology = plan_topology(PARTICIPANTS, DEFAULT_TARGET_ROOM_SIZE).expect("81 is plannable");
    let assignments = assign_participants(&participants, &topology, SEED).expect("roster matches");
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); topology.room_count];
    let index: BTreeMap<&ParticipantId, usize> = participants.iter().enumerate().map(|(i, p)| (p, i)).collect();
    for a in &assignments {
        members[a.room_index].push(index[&a.participant_id]);
    }

    let plans = plans();
    let mut timelines: Vec<Vec<Utterance>> = vec![Vec::new(); PARTICIPANTS];
    let mut gateway = Vec::new();
    let mut text_counter = 0usize;
    let mut chatter_counter = 0usize;

    for (room, room_members) in members.iter().enumerate() {
        let size = room_members.len();
        let speaker = |burst: usize, j: usize| room_members[(burst * BURST_LEN + j) % size];

        // Reasons per batch: each member's list spread evenly over the batches.
        let mut batch_reasons: Vec<Vec<(usize, usize, Polarity)>> = vec![Vec::new(); BATCHES];
        for &u in room_members {
            let list = &plans[u].reasons;
            for (i, &(o, p)) in list.iter().enumerate() {
                batch_reasons[i * BATCHES / list.len()].push((u, o, p));
            }
        }

        let mut initialized = [false; PARTICIPANTS];
        let mut next_change = vec![0usize; PARTICIPANTS];
        let mut batch_texts: Vec<Vec<(usize, usize, Polarity, String)>> = vec![Vec::new(); BATCHES];

        for burst in 0..BURSTS {
            let batch = burst / 2;
            let base = 5_000 + 20_000 * burst as u64 + 200 * room as u64;
            let mut spoke = Vec::new();
            for j in 0..BURST_LEN {
                let u = speaker(burst, j);
                // Voice the next reason this member owes in the current batch.
                let owed = batch_reasons[batch].iter().position(|&(a, _, _)| a == u);
                let text = match owed {
                    Some(pos) => {
                        let (a, o, p) = batch_reasons[batch].remove(pos);
                        let t = reason_text(o, p, text_counter);
                        text_counter += 1;
                        batch_texts[batch].push((a, o, p, t.clone()));
                        t
                    }
                    None => {
                        chatter_counter += 1;
                        CHATTER[chatter_counter % CHATTER.len()].to_string()
                    }
                };
                timelines[u].push(Utterance {
                    t: Millis(base + 500 * j as u64),
                    text,
                });
                if !spoke.contains(&u) {
                    spoke.push(u);
                }
            }
            // Members who did not get a turn to voice a reason this burst
            // carry it to the batch's next burst; at the batch's end any
            // remaining reasons are attributed to what they already said.
            if burst % 2 == 1 {
                let leftovers = std::mem::take(&mut batch_reasons[batch]);
                for (a, o, p) in leftovers {
                    let t = reason_text(o, p, text_counter);
                    text_counter += 1;
                    batch_texts[batch].push((a, o, p, t));
                }
            }

            // Labels for this burst's pass.
            let pass = burst as u64 + 1;
            let mut labels = Vec::new();
            for &u in &spoke {
                let mut scores: Vec<(usize, i8)> = Vec::new();
                if !initialized[u] {
                    initialized[u] = true;
                    scores.extend(&plans[u].initial);
                }
                while let Some((from, change)) = plans[u].changes.get(next_change[u]) {
                    if *from > pass {
                        break;
                    }
                    scores.extend(change);
                    next_change[u] += 1;
                }
                // Later entries for the same option win.
                let mut merged: BTreeMap<usize, i8> = BTreeMap::new();
                for (o, s) in scores {
                    merged.insert(o, s);
                }
                for (o, s) in merged {
                    labels.push(json!({"user": participants[u].as_str(), "option": OPTIONS[o], "score": s}));
                }
            }
            gateway.push(ScriptLine {
                kind: RequestKind::Label,
                room: Some(room),
                index: pass,
                response: json!({ "labels": labels }),
                fail_times: 0,
            });

            if burst % 2 == 1 {
                let texts = &batch_texts[batch];
                let reasons: Vec<_> = texts
                    .iter()
                    .enumerate()
                    .map(|(i, (a, o, p, t))| {
                        json!({
                            "option": OPTIONS[*o],
                            "polarity": p,
                            "text": t,
                            "conviction": 1 + (i + room) % 3,
                            "author": participants[*a].as_str(),
                        })
                    })
                    .collect();
                let summary: Vec<(usize, Polarity)> = texts.iter().map(|(_, o, p, _)| (*o, *p)).collect();
                gateway.push(ScriptLine {
                    kind: RequestKind::Distill,
                    room: Some(room),
                    index: batch as u64,
                    response: json!({
                        "suggestions": [],
                        "reasons": reasons,
                        "narrative": narrative(&summary),
                    }),
                    fail_times: 0,
                });
            }
        }
    }

    let bots = participants
        .iter()
        .zip(timelines)
        .map(|(p, timeline)| BotScript::scripted(p.clone(), timeline))
        .collect();
    Fixture {
        session: FixtureSession {
            session_id: SESSION_ID.into(),
            question: QUESTION.into(),
            options: OPTIONS.iter().map(|s| s.to_string()).collect(),
            seed: SEED,
            duration: DURATION,
        },
        bots,
        gateway,
    }
}
