//! Observer and surrogate agents.
//!
//! Each room has an observer that batches human dialog and distills it into
//! suggestions and reasons, and a surrogate that speaks the upstream room's
//! distilled narrative into its own room. Surrogate messages never enter
//! observer batches, so relayed content only travels further when a human
//! repeats it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::gateway::{DialogLine, Gateway, GatewayError, GatewayRequest, LineRole, SessionContext};
use crate::message::{clip_body, Message};
use crate::time::{Millis, ParticipantId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    InFavor,
    Against,
}

impl Polarity {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "in_favor" | "favor" | "for" | "support" | "in_favour" => Some(Polarity::InFavor),
            "against" | "oppose" | "opposed" => Some(Polarity::Against),
            _ => None,
        }
    }

    /// Connective used in narratives: "argued in favor of X".
    pub fn phrase(self) -> &'static str {
        match self {
            Polarity::InFavor => "in favor of",
            Polarity::Against => "against",
        }
    }
}

/// One argument for or against an option, as extracted by an observer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonRecord {
    pub option: String,
    pub polarity: Polarity,
    pub text: String,
    /// 1 = mild, 3 = extreme.
    pub conviction: u8,
    pub author: ParticipantId,
    pub room_index: usize,
    pub t: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightSummary {
    pub room_index: usize,
    pub batch_index: u64,
    pub suggestions: Vec<String>,
    pub reasons: Vec<ReasonRecord>,
    /// First-person text the downstream surrogate speaks.
    pub narrative: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchTrigger {
    MessageCount,
    ElapsedTime,
    /// Leftover dialog flushed when the session closes.
    SessionEnd,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObserverBatch {
    pub room_index: usize,
    pub batch_index: u64,
    pub messages: Vec<Message>,
    pub trigger: BatchTrigger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatcherConfig {
    pub message_threshold: usize,
    pub time_threshold: Millis,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        BatcherConfig {
            message_threshold: 10,
            time_threshold: Millis::from_secs(30),
        }
    }
}

/// Accumulates a room's human messages into observer batches.
#[derive(Clone, Debug)]
pub struct Batcher {
    room_index: usize,
    config: BatcherConfig,
    pending: Vec<Message>,
    next_index: u64,
}

impl Batcher {
    pub fn new(room_index: usize, config: BatcherConfig) -> Self {
        Batcher {
            room_index,
            config,
            pending: Vec::new(),
            next_index: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Adds a human message; emits a batch once the count threshold is met.
    /// Surrogate messages are ignored.
    pub fn push(&mut self, message: &Message) -> Option<ObserverBatch> {
        if !message.is_human() {
            return None;
        }
        self.pending.push(message.clone());
        (self.pending.len() >= self.config.message_threshold).then(|| self.emit(BatchTrigger::MessageCount))
    }

    /// Emits a batch when the count threshold is met or the oldest pending
    /// message has waited `time_threshold`.
    pub fn tick(&mut self, now: Millis) -> Option<ObserverBatch> {
        let oldest = self.pending.first()?;
        if self.pending.len() >= self.config.message_threshold {
            Some(self.emit(BatchTrigger::MessageCount))
        } else if now.saturating_sub(oldest.t) >= self.config.time_threshold {
            Some(self.emit(BatchTrigger::ElapsedTime))
        } else {
            None
        }
    }

    pub fn flush(&mut self) -> Option<ObserverBatch> {
        (!self.pending.is_empty()).then(|| self.emit(BatchTrigger::SessionEnd))
    }

    fn emit(&mut self, trigger: BatchTrigger) -> ObserverBatch {
        let batch = ObserverBatch {
            room_index: self.room_index,
            batch_index: self.next_index,
            messages: std::mem::take(&mut self.pending),
            trigger,
        };
        self.next_index += 1;
        batch
    }
}

/// Everything observers have distilled during a session.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InsightStore {
    summaries: Vec<InsightSummary>,
    reasons: Vec<ReasonRecord>,
    suggestions: Vec<String>,
}

impl InsightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, summary: InsightSummary) {
        for s in &summary.suggestions {
            if !self.suggestions.contains(s) {
                self.suggestions.push(s.clone());
            }
        }
        self.reasons.extend(summary.reasons.iter().cloned());
        self.summaries.push(summary);
    }

    pub fn reasons(&self) -> &[ReasonRecord] {
        &self.reasons
    }

    pub fn summaries(&self) -> &[InsightSummary] {
        &self.summaries
    }

    /// Newly proposed options in the order they were first seen.
    pub fn suggestions(&self) -> &[String] {
        &self.suggestions
    }

    pub fn from_reasons(reasons: Vec<ReasonRecord>) -> Self {
        InsightStore {
            summaries: Vec::new(),
            reasons,
            suggestions: Vec::new(),
        }
    }
}

/// Gateway request for an observer batch.
pub fn distill_request(context: SessionContext, batch: &ObserverBatch, members: Vec<ParticipantId>) -> GatewayRequest {
    let payload = batch
        .messages
        .iter()
        .map(|m| DialogLine::new(m.author.clone(), m.author_kind, m.body.clone(), LineRole::New))
        .collect();
    GatewayRequest::distill(context, batch.room_index, batch.batch_index, payload, members)
}

/// Turns a distill response into an [`InsightSummary`], stamping each reason
/// with the time of its author's last message in the batch.
pub fn summary_from(batch: &ObserverBatch, output: crate::gateway::DistillOutput) -> InsightSummary {
    let batch_end = batch.messages.last().map(|m| m.t).unwrap_or_default();
    let reasons = output
        .reasons
        .into_iter()
        .map(|r| {
            let t = batch
                .messages
                .iter()
                .rev()
                .find(|m| m.author == r.author)
                .map(|m| m.t)
                .unwrap_or(batch_end);
            ReasonRecord {
                option: r.option,
                polarity: r.polarity,
                text: r.text,
                conviction: r.conviction,
                author: r.author,
                room_index: batch.room_index,
                t,
            }
        })
        .collect();
    InsightSummary {
        room_index: batch.room_index,
        batch_index: batch.batch_index,
        suggestions: output.suggestions,
        reasons,
        narrative: output.narrative,
    }
}

/// Distills one batch and records the result in `store`.
///
/// Panics if the batch is empty; batches are only emitted with content.
pub fn observe(
    gateway: &Gateway,
    context: SessionContext,
    batch: &ObserverBatch,
    members: Vec<ParticipantId>,
    store: &mut InsightStore,
) -> Result<InsightSummary, GatewayError> {
    assert!(!batch.messages.is_empty(), "observe called with an empty batch");
    let request = distill_request(context, batch, members);
    let output = gateway
        .call(&request)?
        .into_distill()
        .ok_or_else(|| GatewayError::BackendError("distill returned another kind".into()))?;
    let summary = summary_from(batch, output);
    store.insert(summary.clone());
    Ok(summary)
}

/// A distilled narrative waiting to be spoken downstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingRelay {
    pub source_room: usize,
    pub batch_index: u64,
    pub narrative: String,
}

/// A destination room's queue of upstream narratives.
#[derive(Clone, Debug, Default)]
pub struct RelayInbox {
    pending: Vec<PendingRelay>,
    last_relay: Option<Millis>,
}

/// What a surrogate says and where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelayUtterance {
    pub source_room: usize,
    pub batches: Vec<u64>,
    pub body: String,
}

impl RelayInbox {
    pub fn push(&mut self, item: PendingRelay) {
        if !item.narrative.trim().is_empty() {
            self.pending.push(item);
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Takes every unrelayed narrative as one utterance unless a relay
    /// happened less than `interval` ago.
    pub fn take(&mut self, now: Millis, interval: Millis) -> Option<RelayUtterance> {
        if self.pending.is_empty() {
            return None;
        }
        if let Some(last) = self.last_relay {
            if now.saturating_sub(last) < interval {
                return None;
            }
        }
        let items = std::mem::take(&mut self.pending);
        self.last_relay = Some(now);
        let mut seen = HashSet::new();
        let body = items
            .iter()
            .map(|p| p.narrative.trim())
            .filter(|n| seen.insert(*n))
            .collect::<Vec<_>>()
            .join("\n");
        Some(RelayUtterance {
            source_room: items[0].source_room,
            batches: items.iter().map(|p| p.batch_index).collect(),
            body: clip_body(&body),
        })
    }
}
