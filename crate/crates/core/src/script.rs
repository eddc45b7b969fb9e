//! Synthetic participants.
//!
//! A [`BotScript`] is one bot's timeline of utterances, optionally produced
//! from a stochastic profile. Script sets are stored as JSONL, one bot per
//! line. Times are milliseconds of session time.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{RuntimeError, Session, SessionState};
use crate::time::{Millis, ParticipantId};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bot {0}: timeline is not sorted by time")]
    Unsorted(ParticipantId),
    #[error("bot {0}: stochastic rate must be positive")]
    BadRate(ParticipantId),
    #[error("{bots} bots for a roster of {roster}")]
    RosterMismatch { bots: usize, roster: usize },
    #[error("bot {0} is not on the roster")]
    UnknownBot(ParticipantId),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub t: Millis,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticProfile {
    /// Mean messages per minute.
    pub rate: f64,
    /// Option -> bias in `[-1, 1]`.
    pub stance: BTreeMap<String, f64>,
    pub lexicon_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BotScript {
    pub bot: ParticipantId,
    #[serde(default)]
    pub timeline: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<StochasticProfile>,
}

impl BotScript {
    pub fn scripted(bot: ParticipantId, timeline: Vec<Utterance>) -> Self {
        BotScript {
            bot,
            timeline,
            profile: None,
        }
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        if self.timeline.windows(2).any(|w| w[0].t > w[1].t) {
            return Err(ScriptError::Unsorted(self.bot.clone()));
        }
        if let Some(p) = &self.profile {
            if !(p.rate > 0.0 && p.rate.is_finite()) {
                return Err(ScriptError::BadRate(self.bot.clone()));
            }
        }
        Ok(())
    }

    /// The scripted timeline merged with utterances drawn from the
    /// stochastic profile over `[0, duration)`.
    pub fn realize(&self, duration: Millis) -> Vec<Utterance> {
        let mut out = self.timeline.clone();
        if let Some(p) = &self.profile {
            out.extend(p.sample(duration));
            out.sort_by_key(|u| u.t);
        }
        out
    }
}

const FAVOR: &[&str] = &[
    "I support {o}",
    "{o} is a strong choice",
    "I like {o} a lot",
    "{o} would win, I trust {o}",
    "{o} has broad appeal",
];
const AGAINST: &[&str] = &[
    "I am against {o}",
    "{o} is a weak pick",
    "{o} is too polarizing",
    "I distrust {o}",
    "{o} would lose",
];
const NEUTRAL: &[&str] = &[
    "interesting point",
    "I am still thinking about it",
    "what does everyone else think?",
    "hard to say",
];
const INTENSIFIER: &str = "really";

impl StochasticProfile {
    /// Poisson arrivals at `rate` per minute; each utterance takes a stance on
    /// an option picked in proportion to `|bias|`.
    pub fn sample(&self, duration: Millis) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.lexicon_seed);
        let per_ms = self.rate / 60_000.0;
        let weights: Vec<(&String, f64)> = self.stance.iter().map(|(o, b)| (o, b.clamp(-1.0, 1.0))).collect();
        let total: f64 = weights.iter().map(|(_, b)| b.abs()).sum();
        let mut out = Vec::new();
        let mut t = 0.0f64;
        loop {
            let u: f64 = rng.random::<f64>();
            t += -(1.0 - u).ln() / per_ms;
            if t >= duration.0 as f64 {
                break;
            }
            let text = if total == 0.0 {
                NEUTRAL[rng.random_range(0..NEUTRAL.len())].to_string()
            } else {
                let mut pick = rng.random::<f64>() * total;
                let (option, bias) = weights
                    .iter()
                    .find(|(_, b)| {
                        pick -= b.abs();
                        pick < 0.0
                    })
                    .copied()
                    .unwrap_or(*weights.last().expect("total > 0 implies an entry"));
                let bank = if bias >= 0.0 { FAVOR } else { AGAINST };
                let phrase = bank[rng.random_range(0..bank.len())].replace("{o}", option);
                if bias.abs() > 0.6 {
                    format!("{INTENSIFIER} {phrase}")
                } else {
                    phrase
                }
            };
            out.push(Utterance {
                t: Millis(t as u64),
                text,
            });
        }
        out
    }
}

/// Random profiles for `participants`, biased over `options`.
pub fn stochastic_bots(participants: &[ParticipantId], options: &[String], rate: f64, seed: u64) -> Vec<BotScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    participants
        .iter()
        .map(|p| BotScript {
            bot: p.clone(),
            timeline: Vec::new(),
            profile: Some(StochasticProfile {
                rate,
                stance: options.iter().map(|o| (o.clone(), rng.random_range(-1.0..=1.0))).collect(),
                lexicon_seed: rng.random(),
            }),
        })
        .collect()
}

pub fn parse_scripts(text: &str) -> Result<Vec<BotScript>, ScriptError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let bot: BotScript = serde_json::from_str(raw).map_err(|e| ScriptError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        bot.validate()?;
        out.push(bot);
    }
    Ok(out)
}

pub fn load_scripts(path: impl AsRef<Path>) -> Result<Vec<BotScript>, ScriptError> {
    parse_scripts(&std::fs::read_to_string(path)?)
}

pub fn scripts_to_jsonl(bots: &[BotScript]) -> String {
    let mut out = String::new();
    for b in bots {
        out.push_str(&serde_json::to_string(b).expect("scripts always serialize"));
        out.push('\n');
    }
    out
}

/// Checks that `bots` covers `roster` exactly.
pub fn check_roster(bots: &[BotScript], roster: &[ParticipantId]) -> Result<(), ScriptError> {
    if bots.len() != roster.len() {
        return Err(ScriptError::RosterMismatch {
            bots: bots.len(),
            roster: roster.len(),
        });
    }
    let roster: HashSet<&ParticipantId> = roster.iter().collect();
    for b in bots {
        b.validate()?;
        if !roster.contains(&b.bot) {
            return Err(ScriptError::UnknownBot(b.bot.clone()));
        }
    }
    Ok(())
}

/// All utterances in posting order: by time, then by bot order.
pub fn merged_timeline(bots: &[BotScript], duration: Millis) -> Vec<(Millis, ParticipantId, String)> {
    let mut all: Vec<(Millis, usize, ParticipantId, String)> = Vec::new();
    for (i, b) in bots.iter().enumerate() {
        for u in b.realize(duration) {
            all.push((u.t, i, b.bot.clone(), u.text));
        }
    }
    all.sort_by_key(|(t, i, _, _)| (*t, *i));
    all.into_iter().map(|(t, _, p, text)| (t, p, text)).collect()
}

/// Plays scripts against a simulated-clock session from start to close.
pub fn play(session: &mut Session, bots: &[BotScript]) -> Result<(), ScriptError> {
    check_roster(bots, &session.config().participants)?;
    if session.state() == SessionState::Created {
        session.start()?;
    }
    let duration = session.config().duration;
    for (t, bot, text) in merged_timeline(bots, duration) {
        session.advance_to(t)?;
        if !session.state().accepts_messages() {
            break;
        }
        session.post_message(&bot, &text)?;
    }
    session.advance_to(duration)?;
    Ok(())
}
