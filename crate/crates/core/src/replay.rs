//! Rebuilding sessions from their event logs.
//!
//! [`record_from_log`] folds the logged outcomes (snapshots, insights,
//! report) into a [`SessionRecord`], from which every export is computed.
//! [`rerun`] goes further and re-drives a fresh simulated session with the
//! logged human messages, which reproduces the original log exactly when the
//! gateway is deterministic.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::agents::InsightSummary;
use crate::analytics::{SessionRecord, TimelineEntry};
use crate::eventlog::{read_log, Event, EventRecord, LogError, SessionCreated};
use crate::export::{render_exports, Exports};
use crate::gateway::Gateway;
use crate::preference::PreferenceSnapshot;
use crate::runtime::{RuntimeError, Session, SessionConfig, SessionState};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log does not start with session_created")]
    MissingSessionCreated,
    #[error("inconsistent log at seq {seq}: {reason}")]
    Inconsistent { seq: u64, reason: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

fn created(records: &[EventRecord]) -> Result<&SessionCreated, ReplayError> {
    match records.first().map(|r| &r.event) {
        Some(Event::SessionCreated(c)) => Ok(c),
        _ => Err(ReplayError::MissingSessionCreated),
    }
}

/// Folds a parsed log into the record analytics run on.
pub fn record_from_log(records: &[EventRecord]) -> Result<SessionRecord, ReplayError> {
    let c = created(records)?;
    let mut record = SessionRecord::new(
        c.session_id.clone(),
        c.question.clone(),
        c.options.clone(),
        c.participants.clone(),
        c.duration,
        c.periods.clone(),
    );
    let mut last_t = records[0].t;
    for r in &records[1..] {
        if r.t < last_t {
            return Err(ReplayError::Inconsistent {
                seq: r.seq,
                reason: format!("time went backwards from {last_t} to {}", r.t),
            });
        }
        last_t = r.t;
        match &r.event {
            Event::SessionCreated(_) => {
                return Err(ReplayError::Inconsistent {
                    seq: r.seq,
                    reason: "second session_created".into(),
                })
            }
            Event::Snapshot(s) => record.timeline.push(TimelineEntry::Snapshot(PreferenceSnapshot {
                room_index: s.room,
                t: r.t,
                pass_index: s.pass,
                scores: s.labels.clone(),
            })),
            Event::Insight(i) => record.timeline.push(TimelineEntry::Insight(InsightSummary {
                room_index: i.room,
                batch_index: i.batch,
                suggestions: i.suggestions.clone(),
                reasons: i.reasons.clone(),
                narrative: i.narrative.clone(),
            })),
            Event::Report(rep) => {
                record.final_answer = rep.final_answer.clone();
                record.summaries = rep.summaries.clone();
            }
            Event::Lifecycle(l) if l.state == SessionState::Closed => record.closed_at = Some(r.t),
            Event::Message(_)
            | Event::Batch(_)
            | Event::NetPreference(_)
            | Event::Relay(_)
            | Event::Lifecycle(_) => {}
        }
    }
    Ok(record)
}

/// Recomputes every export from a log file.
pub fn replay(log_path: impl AsRef<Path>) -> Result<Exports, ReplayError> {
    let records = read_log(log_path)?;
    replay_records(&records)
}

pub fn replay_records(records: &[EventRecord]) -> Result<Exports, ReplayError> {
    Ok(render_exports(&record_from_log(records)?))
}

/// The configuration a log was created with.
pub fn config_from_log(records: &[EventRecord]) -> Result<SessionConfig, ReplayError> {
    let c = created(records)?;
    Ok(SessionConfig {
        session_id: c.session_id.clone(),
        question: c.question.clone(),
        options: c.options.clone(),
        participants: c.participants.clone(),
        duration: c.duration,
        seed: c.topology.seed,
        periods: c.periods.clone(),
        settings: c.settings,
    })
}

/// Re-drives a fresh simulated session with the logged human messages and
/// lifecycle commands, using `gateway` for every model call.
pub fn rerun(records: &[EventRecord], gateway: Arc<Gateway>) -> Result<Session, ReplayError> {
    let mut session = Session::create(config_from_log(records)?, gateway)?;
    for r in &records[1..] {
        match &r.event {
            Event::Lifecycle(l) if l.state == SessionState::Running && session.state() == SessionState::Created => {
                session.start()?
            }
            Event::Lifecycle(l) if l.state == SessionState::Closed => {
                session.advance_to(r.t)?;
                if session.state() != SessionState::Closed {
                    session.close()?;
                }
            }
            Event::Message(m) if m.is_human() => {
                session.advance_to(r.t)?;
                session.post_message(&m.author, &m.body)?;
            }
            _ => {}
        }
    }
    Ok(session)
}
