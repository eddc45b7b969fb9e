//! Preference labeling state.
//!
//! Every participant holds an integer score in `[-3, +3]` per option. Labeling
//! passes produce [`PreferenceSnapshot`]s; merging one overwrites exactly the
//! `(participant, option)` pairs it mentions and leaves every other pair at
//! its last labeled value (initially 0). Net preference is the mean score
//! over the whole population, undecided participants included, and the final
//! answer is its argmax.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ScoreLabel, MAX_SCORE, MIN_SCORE};
use crate::time::{Millis, ParticipantId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PreferenceError {
    #[error("room {room}: expected pass {expected}, got {got}")]
    OutOfOrderSnapshot { room: usize, expected: u64, got: u64 },
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("score {0} outside [-3, 3]")]
    ScoreOutOfRange(i8),
    #[error("no option was configured or proposed")]
    NoOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Labels persist across passes until overwritten.
    #[default]
    CarryForward,
    /// Each pass sees the full transcript and rewrites every member's scores.
    Recompute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelerConfig {
    pub message_threshold: usize,
    pub max_wait: Millis,
    /// Earlier messages included as context with each pass.
    pub context_messages: usize,
    pub mode: LabelMode,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            message_threshold: 5,
            max_wait: Millis::from_secs(15),
            context_messages: 10,
            mode: LabelMode::CarryForward,
        }
    }
}

/// Labels produced by one pass in one room.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSnapshot {
    pub room_index: usize,
    pub t: Millis,
    pub pass_index: u64,
    pub scores: Vec<ScoreLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CarriedScore {
    pub score: i8,
    pub updated: Millis,
    /// Global merge counter, breaks recency ties within one millisecond.
    pub merge_seq: u64,
}

/// Ordered option labels: configured options first, then suggestions in the
/// order they appeared.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OptionSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl OptionSet {
    pub fn new(labels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut set = OptionSet::default();
        for l in labels {
            set.insert(l.into());
        }
        set
    }

    /// Adds a label if missing; returns its position.
    pub fn insert(&mut self, label: String) -> usize {
        if let Some(&i) = self.index.get(&label) {
            return i;
        }
        self.index.insert(label.clone(), self.labels.len());
        self.labels.push(label);
        self.labels.len() - 1
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Carried-forward scores for every participant.
#[derive(Clone, Debug)]
pub struct PreferenceState {
    participants: Vec<ParticipantId>,
    index: HashMap<ParticipantId, usize>,
    options: OptionSet,
    scores: Vec<BTreeMap<String, CarriedScore>>,
    last_pass: BTreeMap<usize, u64>,
    merges: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionNet {
    pub option: String,
    pub net: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetPreference {
    pub t: Millis,
    pub per_option: Vec<OptionNet>,
}

impl NetPreference {
    pub fn get(&self, option: &str) -> Option<f64> {
        self.per_option.iter().find(|o| o.option == option).map(|o| o.net)
    }
}

impl PreferenceState {
    pub fn new(participants: Vec<ParticipantId>, options: OptionSet) -> Self {
        let index = participants.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        let scores = vec![BTreeMap::new(); participants.len()];
        PreferenceState {
            participants,
            index,
            options,
            scores,
            last_pass: BTreeMap::new(),
            merges: 0,
        }
    }

    pub fn participants(&self) -> &[ParticipantId] {
        &self.participants
    }

    pub fn options(&self) -> &OptionSet {
        &self.options
    }

    pub fn add_option(&mut self, label: impl Into<String>) {
        self.options.insert(label.into());
    }

    pub fn last_pass(&self, room: usize) -> u64 {
        self.last_pass.get(&room).copied().unwrap_or(0)
    }

    /// Current carried score; 0 when never labeled.
    pub fn score(&self, participant: &ParticipantId, option: &str) -> i8 {
        self.index
            .get(participant)
            .and_then(|&i| self.scores[i].get(option))
            .map_or(0, |c| c.score)
    }

    pub fn carried(&self, participant: usize, option: &str) -> Option<&CarriedScore> {
        self.scores[participant].get(option)
    }

    /// Applies a snapshot. Pairs in the snapshot overwrite the carried value;
    /// all other pairs keep theirs.
    pub fn merge_snapshot(&mut self, snapshot: &PreferenceSnapshot) -> Result<(), PreferenceError> {
        let expected = self.last_pass(snapshot.room_index) + 1;
        if snapshot.pass_index != expected {
            return Err(PreferenceError::OutOfOrderSnapshot {
                room: snapshot.room_index,
                expected,
                got: snapshot.pass_index,
            });
        }
        let mut resolved = Vec::with_capacity(snapshot.scores.len());
        for label in &snapshot.scores {
            let &i = self
                .index
                .get(&label.user)
                .ok_or_else(|| PreferenceError::UnknownParticipant(label.user.clone()))?;
            if !(MIN_SCORE..=MAX_SCORE).contains(&label.score) {
                return Err(PreferenceError::ScoreOutOfRange(label.score));
            }
            resolved.push((i, label));
        }
        self.merges += 1;
        for (i, label) in resolved {
            self.options.insert(label.option.clone());
            self.scores[i].insert(
                label.option.clone(),
                CarriedScore {
                    score: label.score,
                    updated: snapshot.t,
                    merge_seq: self.merges,
                },
            );
        }
        self.last_pass.insert(snapshot.room_index, snapshot.pass_index);
        Ok(())
    }

    /// Integer sum of carried scores per option, in option order.
    pub fn option_sums(&self) -> Vec<(String, i64)> {
        self.options
            .labels()
            .iter()
            .map(|o| {
                let sum = self.scores.iter().filter_map(|s| s.get(o)).map(|c| c.score as i64).sum();
                (o.clone(), sum)
            })
            .collect()
    }

    /// Mean carried score per option over every participant.
    pub fn net_preference(&self, now: Millis) -> NetPreference {
        let population = self.participants.len().max(1) as f64;
        NetPreference {
            t: now,
            per_option: self
                .option_sums()
                .into_iter()
                .map(|(option, sum)| OptionNet {
                    option,
                    net: sum as f64 / population,
                })
                .collect(),
        }
    }

    /// Option with the highest net preference; ties go to the
    /// lexicographically smaller label.
    pub fn final_answer(&self) -> Result<String, PreferenceError> {
        // Same denominator for every option, so comparing sums is exact.
        self.option_sums()
            .into_iter()
            .max_by(|(a, sa), (b, sb)| sa.cmp(sb).then_with(|| b.cmp(a)))
            .map(|(o, _)| o)
            .ok_or(PreferenceError::NoOptions)
    }

    /// The participant's highest positive option; `None` when undecided.
    /// Ties go to the most recently labeled option, then the smaller label.
    pub fn top_choice(&self, participant: &ParticipantId) -> Option<String> {
        let &i = self.index.get(participant)?;
        self.top_choice_at(i)
    }

    pub fn top_choice_at(&self, participant: usize) -> Option<String> {
        self.scores[participant]
            .iter()
            .filter(|(_, c)| c.score > 0)
            .max_by(|(oa, a), (ob, b)| {
                a.score
                    .cmp(&b.score)
                    .then(a.updated.cmp(&b.updated))
                    .then(a.merge_seq.cmp(&b.merge_seq))
                    .then_with(|| ob.cmp(oa))
            })
            .map(|(o, _)| o.clone())
    }
}

/// Result of [`PreferenceState::final_answer`], as a free function.
pub fn final_answer(state: &PreferenceState) -> Result<String, PreferenceError> {
    state.final_answer()
}

pub fn net_preference(state: &PreferenceState, now: Millis) -> NetPreference {
    state.net_preference(now)
}

pub fn top_choice(state: &PreferenceState, participant: &ParticipantId) -> Option<String> {
    state.top_choice(participant)
}

pub fn merge_snapshot(state: &mut PreferenceState, snapshot: &PreferenceSnapshot) -> Result<(), PreferenceError> {
    state.merge_snapshot(snapshot)
}
