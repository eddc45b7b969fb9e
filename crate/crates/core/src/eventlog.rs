//! Append-only session event log.
//!
//! One JSON object per line: `{"seq":..,"t":..,"kind":..,"payload":{..}}`,
//! UTF-8 with LF terminators. `seq` starts at 1 and is gapless; `t` is
//! milliseconds since session start. Payload field order is fixed by the
//! types below, so parsing a line and serializing it again reproduces it
//! byte for byte.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::agents::{BatchTrigger, ReasonRecord};
use crate::analytics::{ArgumentSummary, PeriodDefinition};
use crate::gateway::ScoreLabel;
use crate::message::Message;
use crate::preference::OptionNet;
use crate::runtime::{SessionSettings, SessionState};
use crate::time::{Millis, ParticipantId};
use crate::topology::RoomAssignment;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log is closed")]
    LogClosed,
    #[error("storage full")]
    StorageFull,
    #[error("event log I/O: {0}")]
    Io(io::Error),
    #[error("corrupt event log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
}

impl From<io::Error> for LogError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            LogError::StorageFull
        } else {
            LogError::Io(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyRecord {
    pub population_size: usize,
    pub room_count: usize,
    pub room_sizes: Vec<usize>,
    pub relay_edges: Vec<(usize, usize)>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub participants: Vec<ParticipantId>,
    pub duration: Millis,
    pub topology: TopologyRecord,
    pub assignments: Vec<RoomAssignment>,
    pub periods: Vec<PeriodDefinition>,
    pub settings: SessionSettings,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEvent {
    pub room: usize,
    pub batch: u64,
    pub trigger: BatchTrigger,
    pub room_seqs: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightEvent {
    pub room: usize,
    pub batch: u64,
    pub suggestions: Vec<String>,
    pub reasons: Vec<ReasonRecord>,
    pub narrative: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEvent {
    pub room: usize,
    pub pass: u64,
    pub labels: Vec<ScoreLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetPreferenceEvent {
    pub values: Vec<OptionNet>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayEvent {
    pub from_room: usize,
    pub to_room: usize,
    pub batches: Vec<u64>,
    pub room_seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub state: SessionState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEvent {
    pub final_answer: Option<String>,
    pub summaries: Vec<ArgumentSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated,
    Message,
    Batch,
    Insight,
    Snapshot,
    NetPreference,
    Relay,
    Lifecycle,
    Report,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    SessionCreated(Box<SessionCreated>),
    Message(Message),
    Batch(BatchEvent),
    Insight(InsightEvent),
    Snapshot(SnapshotEvent),
    NetPreference(NetPreferenceEvent),
    Relay(RelayEvent),
    Lifecycle(LifecycleEvent),
    Report(ReportEvent),
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::SessionCreated(_) => EventKind::SessionCreated,
            Event::Message(_) => EventKind::Message,
            Event::Batch(_) => EventKind::Batch,
            Event::Insight(_) => EventKind::Insight,
            Event::Snapshot(_) => EventKind::Snapshot,
            Event::NetPreference(_) => EventKind::NetPreference,
            Event::Relay(_) => EventKind::Relay,
            Event::Lifecycle(_) => EventKind::Lifecycle,
            Event::Report(_) => EventKind::Report,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub seq: u64,
    pub t: Millis,
    pub event: Event,
}

impl Serialize for EventRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("EventRecord", 4)?;
        s.serialize_field("seq", &self.seq)?;
        s.serialize_field("t", &self.t)?;
        s.serialize_field("kind", &self.event.kind())?;
        match &self.event {
            Event::SessionCreated(p) => s.serialize_field("payload", p)?,
            Event::Message(p) => s.serialize_field("payload", p)?,
            Event::Batch(p) => s.serialize_field("payload", p)?,
            Event::Insight(p) => s.serialize_field("payload", p)?,
            Event::Snapshot(p) => s.serialize_field("payload", p)?,
            Event::NetPreference(p) => s.serialize_field("payload", p)?,
            Event::Relay(p) => s.serialize_field("payload", p)?,
            Event::Lifecycle(p) => s.serialize_field("payload", p)?,
            Event::Report(p) => s.serialize_field("payload", p)?,
        }
        s.end()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord<'a> {
    seq: u64,
    t: Millis,
    kind: EventKind,
    #[serde(borrow)]
    payload: &'a RawValue,
}

impl<'de> Deserialize<'de> for EventRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawRecord::deserialize(deserializer)?;
        let json = raw.payload.get();
        fn parse<'a, T: Deserialize<'a>, E: serde::de::Error>(json: &'a str) -> Result<T, E> {
            serde_json::from_str(json).map_err(E::custom)
        }
        let event = match raw.kind {
            EventKind::SessionCreated => Event::SessionCreated(parse(json)?),
            EventKind::Message => Event::Message(parse(json)?),
            EventKind::Batch => Event::Batch(parse(json)?),
            EventKind::Insight => Event::Insight(parse(json)?),
            EventKind::Snapshot => Event::Snapshot(parse(json)?),
            EventKind::NetPreference => Event::NetPreference(parse(json)?),
            EventKind::Relay => Event::Relay(parse(json)?),
            EventKind::Lifecycle => Event::Lifecycle(parse(json)?),
            EventKind::Report => Event::Report(parse(json)?),
        };
        if raw.seq == 0 {
            return Err(D::Error::custom("seq starts at 1"));
        }
        Ok(EventRecord {
            seq: raw.seq,
            t: raw.t,
            event,
        })
    }
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialize")
    }

    pub fn parse_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Single-writer append-only log. Lines are kept in memory and, when a sink
/// is attached, written and flushed on every append.
pub struct EventLog {
    next_seq: u64,
    closed: bool,
    records: Vec<EventRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("next_seq", &self.next_seq)
            .field("closed", &self.closed)
            .field("durable", &self.sink.is_some())
            .finish()
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog {
            next_seq: 1,
            closed: false,
            records: Vec::new(),
            sink: None,
        }
    }

    pub fn with_sink(sink: impl Write + Send + 'static) -> Self {
        EventLog {
            sink: Some(Box::new(sink)),
            ..Self::in_memory()
        }
    }

    /// Creates (truncating) `path` and logs to it.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, LogError> {
        Ok(Self::with_sink(File::create(path)?))
    }

    pub fn append(&mut self, t: Millis, event: Event) -> Result<u64, LogError> {
        if self.closed {
            return Err(LogError::LogClosed);
        }
        let record = EventRecord {
            seq: self.next_seq,
            t,
            event,
        };
        if let Some(sink) = self.sink.as_mut() {
            let mut line = record.to_line();
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        self.next_seq += 1;
        self.records.push(record);
        Ok(self.next_seq - 1)
    }

    pub fn close(&mut self) -> Result<(), LogError> {
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
        }
        self.closed = true;
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The log as JSONL text.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }
}

/// Parses JSONL text, checking that `seq` runs gapless from 1.
pub fn parse_log(text: &str) -> Result<Vec<EventRecord>, LogError> {
    let mut records = Vec::new();
    let mut expected = 1u64;
    let mut rest = text;
    while !rest.is_empty() {
        let (line, terminated) = match rest.find('\n') {
            Some(i) => (&rest[..i], true),
            None => (rest, false),
        };
        rest = if terminated { &rest[line.len() + 1..] } else { "" };
        if !terminated {
            return Err(LogError::CorruptLog {
                seq: expected,
                reason: "truncated final line".into(),
            });
        }
        let record = EventRecord::parse_line(line).map_err(|e| LogError::CorruptLog {
            seq: expected,
            reason: e.to_string(),
        })?;
        if record.seq != expected {
            return Err(LogError::CorruptLog {
                seq: expected,
                reason: format!("found seq {}", record.seq),
            });
        }
        expected += 1;
        records.push(record);
    }
    Ok(records)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, LogError> {
    let mut text = String::new();
    let mut reader = BufReader::new(File::open(path)?);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        text.push_str(&line);
    }
    parse_log(&text)
}
