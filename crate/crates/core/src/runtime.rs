//! The session engine.
//!
//! A [`Session`] is a deterministic state machine. Everything that happens to
//! it goes through `&mut self`: posted messages, clock ticks, gateway
//! completions and lifecycle commands. Time-based triggers (labeling
//! deadlines, observer batches, relays, period and session boundaries) are
//! evaluated on a fixed tick quantum of the session clock.
//!
//! Gateway work runs in one of two [`JobMode`]s. `Inline` calls the gateway
//! synchronously, which makes simulated runs bit-reproducible. `Deferred`
//! queues [`Job`]s for the host to execute off-lock and feed back through
//! [`Session::complete_job`]; the live server uses this so slow model calls
//! never block chat.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    distill_request, summary_from, BatcherConfig, Batcher, InsightStore, InsightSummary, ObserverBatch, PendingRelay,
    RelayInbox,
};
use crate::analytics::{
    default_periods, generate_argument_summaries, period_reports, tally_reasons, top_choice_series, validate_periods,
    ArgumentSummary, PeriodDefinition, PeriodReport, ReasonTally, SessionRecord, TimelineEntry, TopChoiceSample,
};
use crate::clock::SessionClock;
use crate::eventlog::{
    BatchEvent, Event, EventLog, InsightEvent, LifecycleEvent, LogError, NetPreferenceEvent, RelayEvent, ReportEvent,
    SessionCreated, SnapshotEvent, TopologyRecord,
};
use crate::gateway::{
    DialogLine, Gateway, GatewayError, GatewayRequest, GatewayResponse, LineRole, ScoreLabel, SessionContext,
};
use crate::message::{AuthorKind, Message, MAX_BODY_CHARS};
use crate::preference::{LabelMode, LabelerConfig, NetPreference, OptionSet, PreferenceSnapshot, PreferenceState};
use crate::time::{Millis, ParticipantId};
use crate::topology::{
    assign_participants, plan_topology, RoomAssignment, SwarmTopology, TopologyError, DEFAULT_TARGET_ROOM_SIZE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    Running,
    Converging,
    Closed,
}

impl SessionState {
    pub fn accepts_messages(self) -> bool {
        matches!(self, SessionState::Running | SessionState::Converging)
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionState::Created => "created",
            SessionState::Running => "running",
            SessionState::Converging => "converging",
            SessionState::Closed => "closed",
        })
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("session is not running")]
    SessionNotRunning,
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("message body is empty")]
    EmptyBody,
    #[error("message body exceeds {MAX_BODY_CHARS} characters")]
    BodyTooLong,
    #[error("session runs on the wall clock")]
    RealClockSession,
    #[error("cannot go from {from} to {to}")]
    IllegalTransition { from: SessionState, to: SessionState },
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Tunable timing and threshold parameters, recorded in the event log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSettings {
    pub target_room_size: usize,
    pub batcher: BatcherConfig,
    pub labeler: LabelerConfig,
    /// Minimum spacing between surrogate messages in one room.
    pub relay_interval: Millis,
    pub tick_quantum: Millis,
}

impl Default for SessionSettings {
    fn default() -> Self {
        SessionSettings {
            target_room_size: DEFAULT_TARGET_ROOM_SIZE,
            batcher: BatcherConfig::default(),
            labeler: LabelerConfig::default(),
            relay_interval: Millis::from_secs(20),
            tick_quantum: Millis::from_secs(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub session_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub participants: Vec<ParticipantId>,
    pub duration: Millis,
    pub seed: u64,
    pub periods: Vec<PeriodDefinition>,
    pub settings: SessionSettings,
}

impl SessionConfig {
    pub fn new(
        question: impl Into<String>,
        options: Vec<String>,
        participants: Vec<ParticipantId>,
        duration: Millis,
    ) -> Self {
        SessionConfig {
            session_id: "session".into(),
            question: question.into(),
            options,
            participants,
            duration,
            seed: 0,
            periods: default_periods(),
            settings: SessionSettings::default(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.session_id = id.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_settings(mut self, settings: SessionSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_periods(mut self, periods: Vec<PeriodDefinition>) -> Self {
        self.periods = periods;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JobMode {
    #[default]
    Inline,
    Deferred,
}

/// A gateway call the host must execute and report back.
#[derive(Clone, Debug)]
pub struct Job {
    pub id: u64,
    pub room: usize,
    pub request: GatewayRequest,
}

/// Something the host should deliver to connected clients.
#[derive(Clone, Debug, PartialEq)]
pub enum Outbound {
    /// Deliver to the members of `message.room_index` only.
    Message(Message),
    State { state: SessionState, t: Millis },
    Closed { final_answer: Option<String>, t: Millis },
}

/// Live analytics view served to dashboards.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub state: SessionState,
    pub elapsed: Millis,
    pub duration: Millis,
    pub net_preference: NetPreference,
    pub top_choices: TopChoiceSample,
    pub reason_tally: ReasonTally,
    pub periods: Vec<PeriodEntry>,
    pub final_answer: Option<String>,
    pub summaries: Vec<ArgumentSummary>,
}

/// A period's report, or `None` while it has no samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodEntry {
    pub name: String,
    pub report: Option<PeriodReport>,
}

struct QueuedBatch {
    batch: ObserverBatch,
    attempts: u32,
}

enum Work {
    Label { room: usize, covered: usize },
    Distill { room: usize, queued: QueuedBatch },
}

struct Room {
    members: Vec<ParticipantId>,
    messages: Vec<Message>,
    batcher: Batcher,
    distill_queue: VecDeque<QueuedBatch>,
    distill_busy: bool,
    inbox: RelayInbox,
    /// Indices into `messages` of human messages not yet labeled.
    unlabeled: Vec<usize>,
    label_busy: bool,
    next_pass: u64,
    label_failures: u32,
    retry_due: bool,
}

pub struct Session {
    config: SessionConfig,
    topology: SwarmTopology,
    assignments: Vec<RoomAssignment>,
    room_of: HashMap<ParticipantId, usize>,
    rooms: Vec<Room>,
    clock: SessionClock,
    origin: Millis,
    next_tick: Millis,
    converge_at: Millis,
    state: SessionState,
    closing: bool,
    gateway: Arc<Gateway>,
    mode: JobMode,
    next_job: u64,
    inflight: BTreeMap<u64, Work>,
    ready: Vec<Job>,
    prefs: PreferenceState,
    insights: InsightStore,
    record: SessionRecord,
    log: EventLog,
    outbound: VecDeque<Outbound>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("session_id", &self.config.session_id)
            .field("state", &self.state)
            .field("rooms", &self.rooms.len())
            .finish_non_exhaustive()
    }
}

impl Session {
    /// Simulated clock, in-memory log, inline gateway calls.
    pub fn create(config: SessionConfig, gateway: Arc<Gateway>) -> Result<Self, RuntimeError> {
        Self::create_with(config, gateway, SessionClock::simulated(), EventLog::in_memory(), JobMode::Inline)
    }

    pub fn create_with(
        config: SessionConfig,
        gateway: Arc<Gateway>,
        clock: SessionClock,
        mut log: EventLog,
        mode: JobMode,
    ) -> Result<Self, RuntimeError> {
        if config.duration == Millis::ZERO {
            return Err(RuntimeError::InvalidConfig("duration must be positive".into()));
        }
        if config.settings.tick_quantum == Millis::ZERO {
            return Err(RuntimeError::InvalidConfig("tick quantum must be positive".into()));
        }
        validate_periods(&config.periods).map_err(|e| RuntimeError::InvalidConfig(e.to_string()))?;
        let topology = plan_topology(config.participants.len(), config.settings.target_room_size)?;
        let assignments = assign_participants(&config.participants, &topology, config.seed)?;

        let mut rooms: Vec<Room> = (0..topology.room_count)
            .map(|r| Room {
                members: Vec::new(),
                messages: Vec::new(),
                batcher: Batcher::new(r, config.settings.batcher),
                distill_queue: VecDeque::new(),
                distill_busy: false,
                inbox: RelayInbox::default(),
                unlabeled: Vec::new(),
                label_busy: false,
                next_pass: 1,
                label_failures: 0,
                retry_due: false,
            })
            .collect();
        let mut room_of = HashMap::with_capacity(assignments.len());
        for a in &assignments {
            rooms[a.room_index].members.push(a.participant_id.clone());
            room_of.insert(a.participant_id.clone(), a.room_index);
        }

        let created = SessionCreated {
            session_id: config.session_id.clone(),
            question: config.question.clone(),
            options: config.options.clone(),
            participants: config.participants.clone(),
            duration: config.duration,
            topology: TopologyRecord {
                population_size: topology.population_size,
                room_count: topology.room_count,
                room_sizes: topology.room_sizes.clone(),
                relay_edges: topology.relay_edges.clone(),
                seed: config.seed,
            },
            assignments: assignments.clone(),
            periods: config.periods.clone(),
            settings: config.settings,
        };
        log.append(Millis::ZERO, Event::SessionCreated(Box::new(created)))?;
        log.append(
            Millis::ZERO,
            Event::Lifecycle(LifecycleEvent {
                state: SessionState::Created,
            }),
        )?;

        let prefs = PreferenceState::new(config.participants.clone(), OptionSet::new(config.options.iter().cloned()));
        let record = SessionRecord::new(
            config.session_id.clone(),
            config.question.clone(),
            config.options.clone(),
            config.participants.clone(),
            config.duration,
            config.periods.clone(),
        );
        let converge_at = config.periods.last().map_or(config.duration, |p| p.start);
        Ok(Session {
            topology,
            assignments,
            room_of,
            rooms,
            clock,
            origin: Millis::ZERO,
            next_tick: Millis::ZERO,
            converge_at,
            state: SessionState::Created,
            closing: false,
            gateway,
            mode,
            next_job: 1,
            inflight: BTreeMap::new(),
            ready: Vec::new(),
            prefs,
            insights: InsightStore::new(),
            record,
            log,
            outbound: VecDeque::new(),
            config,
        })
    }

    // ------------------------------------------------------------ accessors

    pub fn session_id(&self) -> &str {
        &self.config.session_id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn topology(&self) -> &SwarmTopology {
        &self.topology
    }

    pub fn assignments(&self) -> &[RoomAssignment] {
        &self.assignments
    }

    pub fn room_of(&self, participant: &ParticipantId) -> Option<usize> {
        self.room_of.get(participant).copied()
    }

    /// Human members of a room.
    pub fn room_members(&self, room: usize) -> &[ParticipantId] {
        &self.rooms[room].members
    }

    pub fn room_messages(&self, room: usize) -> &[Message] {
        &self.rooms[room].messages
    }

    pub fn preferences(&self) -> &PreferenceState {
        &self.prefs
    }

    pub fn insights(&self) -> &InsightStore {
        &self.insights
    }

    pub fn record(&self) -> &SessionRecord {
        &self.record
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.record.final_answer.as_deref()
    }

    pub fn is_simulated(&self) -> bool {
        self.clock.is_simulated()
    }

    /// Session time: zero until started, then time since start.
    pub fn now(&self) -> Millis {
        if self.state == SessionState::Created {
            Millis::ZERO
        } else {
            self.clock.now().saturating_sub(self.origin)
        }
    }

    /// Number of human messages in `room` awaiting a labeling pass.
    pub fn unlabeled_count(&self, room: usize) -> usize {
        self.rooms[room].unlabeled.len()
    }

    pub fn drain_outbound(&mut self) -> Vec<Outbound> {
        self.outbound.drain(..).collect()
    }

    fn context(&self) -> SessionContext {
        SessionContext {
            session_id: self.config.session_id.clone(),
            question: self.config.question.clone(),
            options: self.prefs.options().labels().to_vec(),
        }
    }

    // ------------------------------------------------------------ lifecycle

    pub fn start(&mut self) -> Result<(), RuntimeError> {
        if self.state != SessionState::Created {
            return Err(RuntimeError::IllegalTransition {
                from: self.state,
                to: SessionState::Running,
            });
        }
        self.origin = match &self.clock {
            SessionClock::Simulated(c) => crate::clock::Clock::now(c),
            SessionClock::Wall(_) => {
                self.clock = SessionClock::wall();
                Millis::ZERO
            }
        };
        self.set_state(Millis::ZERO, SessionState::Running)?;
        self.catch_up(Millis::ZERO)
    }

    /// Closes the session now and returns the final answer.
    pub fn close(&mut self) -> Result<Option<String>, RuntimeError> {
        match self.state {
            SessionState::Running | SessionState::Converging => {}
            from => {
                return Err(RuntimeError::IllegalTransition {
                    from,
                    to: SessionState::Closed,
                })
            }
        }
        let now = self.now();
        self.catch_up(now)?;
        if self.state != SessionState::Closed {
            self.close_at(now)?;
        }
        Ok(self.record.final_answer.clone())
    }

    fn set_state(&mut self, t: Millis, state: SessionState) -> Result<(), RuntimeError> {
        self.log.append(t, Event::Lifecycle(LifecycleEvent { state }))?;
        self.state = state;
        if state != SessionState::Closed {
            self.outbound.push_back(Outbound::State { state, t });
        }
        Ok(())
    }

    // ------------------------------------------------------------ clock

    /// Moves the simulated clock forward by `dt`, firing every trigger that
    /// falls inside the window in time order.
    pub fn advance_clock(&mut self, dt: Millis) -> Result<(), RuntimeError> {
        let SessionClock::Simulated(clock) = &self.clock else {
            return Err(RuntimeError::RealClockSession);
        };
        if dt == Millis::ZERO {
            return Ok(());
        }
        let clock = clock.clone();
        let target = self.now() + dt;
        if self.state == SessionState::Created {
            clock.advance(dt);
            return Ok(());
        }
        while self.state != SessionState::Closed {
            let t = self.next_boundary();
            if t > target {
                break;
            }
            clock.set(self.origin + t);
            self.run_tick(t)?;
        }
        clock.set(self.origin + target);
        Ok(())
    }

    /// Advances the simulated clock to session time `t` (no-op if past).
    pub fn advance_to(&mut self, t: Millis) -> Result<(), RuntimeError> {
        let now = self.now();
        self.advance_clock(t.saturating_sub(now))
    }

    /// Fires every trigger due by the current clock reading. Hosts of
    /// wall-clock sessions call this periodically.
    pub fn pump(&mut self) -> Result<(), RuntimeError> {
        let now = self.now();
        self.catch_up(now)
    }

    fn next_boundary(&self) -> Millis {
        self.next_tick.min(self.config.duration)
    }

    fn catch_up(&mut self, now: Millis) -> Result<(), RuntimeError> {
        if self.state == SessionState::Created {
            return Ok(());
        }
        while self.state != SessionState::Closed {
            let t = self.next_boundary();
            if t > now {
                break;
            }
            self.run_tick(t)?;
        }
        Ok(())
    }

    fn run_tick(&mut self, t: Millis) -> Result<(), RuntimeError> {
        if t == self.next_tick {
            self.next_tick = self.next_tick + self.config.settings.tick_quantum;
        }
        if self.state == SessionState::Running && t >= self.converge_at {
            self.set_state(t, SessionState::Converging)?;
        }
        if t >= self.config.duration {
            return self.close_at(t);
        }
        for room in 0..self.rooms.len() {
            self.batcher_tick_at(room, t)?;
            self.relay_at(room, t)?;
            self.labeler_tick_at(room, t, true)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------ messages

    pub fn post_message(&mut self, participant: &ParticipantId, body: &str) -> Result<Message, RuntimeError> {
        let now = self.now();
        self.catch_up(now)?;
        if !self.state.accepts_messages() {
            return Err(RuntimeError::SessionNotRunning);
        }
        let room = self
            .room_of(participant)
            .ok_or_else(|| RuntimeError::UnknownParticipant(participant.clone()))?;
        let body = body.trim();
        if body.is_empty() {
            return Err(RuntimeError::EmptyBody);
        }
        if body.chars().count() > MAX_BODY_CHARS {
            return Err(RuntimeError::BodyTooLong);
        }
        let message = self.append_message(room, participant.clone(), AuthorKind::Human, body.to_string(), now)?;
        let index = self.rooms[room].messages.len() - 1;
        self.rooms[room].unlabeled.push(index);
        self.labeler_tick_at(room, now, false)?;
        if let Some(batch) = self.rooms[room].batcher.push(&message) {
            self.enqueue_batch(batch, now)?;
        }
        Ok(message)
    }

    fn append_message(
        &mut self,
        room: usize,
        author: ParticipantId,
        author_kind: AuthorKind,
        body: String,
        t: Millis,
    ) -> Result<Message, RuntimeError> {
        let room_seq = self.rooms[room].messages.len() as u64 + 1;
        let message = Message {
            message_id: Message::id_for(room, room_seq),
            room_index: room,
            author,
            author_kind,
            body,
            t,
            room_seq,
        };
        self.log.append(t, Event::Message(message.clone()))?;
        self.rooms[room].messages.push(message.clone());
        self.outbound.push_back(Outbound::Message(message.clone()));
        Ok(message)
    }

    // ------------------------------------------------------------ observer

    /// Emits a time-triggered observer batch for `room` if one is due.
    pub fn batcher_tick(&mut self, room: usize) -> Result<Option<ObserverBatch>, RuntimeError> {
        let now = self.now();
        self.catch_up(now)?;
        if !self.state.accepts_messages() {
            return Ok(None);
        }
        let batch = self.rooms[room].batcher.tick(now);
        if let Some(b) = &batch {
            self.enqueue_batch(b.clone(), now)?;
        }
        Ok(batch)
    }

    fn batcher_tick_at(&mut self, room: usize, t: Millis) -> Result<(), RuntimeError> {
        if let Some(batch) = self.rooms[room].batcher.tick(t) {
            self.enqueue_batch(batch, t)?;
        } else {
            // A batch that failed once is retried on the next tick.
            self.dispatch_distill(room, t)?;
        }
        Ok(())
    }

    fn enqueue_batch(&mut self, batch: ObserverBatch, t: Millis) -> Result<(), RuntimeError> {
        let room = batch.room_index;
        self.log.append(
            t,
            Event::Batch(BatchEvent {
                room,
                batch: batch.batch_index,
                trigger: batch.trigger,
                room_seqs: batch.messages.iter().map(|m| m.room_seq).collect(),
            }),
        )?;
        self.rooms[room].distill_queue.push_back(QueuedBatch { batch, attempts: 0 });
        self.dispatch_distill(room, t)
    }

    fn dispatch_distill(&mut self, room: usize, t: Millis) -> Result<(), RuntimeError> {
        if self.rooms[room].distill_busy {
            return Ok(());
        }
        let Some(queued) = self.rooms[room].distill_queue.pop_front() else {
            return Ok(());
        };
        let request = distill_request(self.context(), &queued.batch, self.rooms[room].members.clone());
        self.rooms[room].distill_busy = true;
        self.dispatch(Work::Distill { room, queued }, request, t)
    }

    fn apply_distill(
        &mut self,
        room: usize,
        mut queued: QueuedBatch,
        result: Result<GatewayResponse, GatewayError>,
        t: Millis,
    ) -> Result<(), RuntimeError> {
        self.rooms[room].distill_busy = false;
        let output = result.and_then(|r| {
            r.into_distill()
                .ok_or_else(|| GatewayError::BackendError("distill returned another kind".into()))
        });
        match output {
            Ok(output) => {
                let summary = summary_from(&queued.batch, output);
                self.record_insight(summary, t)?;
                if !self.closing {
                    self.dispatch_distill(room, t)?;
                }
            }
            Err(e) if queued.attempts == 0 => {
                log::warn!("room {room} batch {}: {e}; re-queued", queued.batch.batch_index);
                queued.attempts += 1;
                self.rooms[room].distill_queue.push_front(queued);
            }
            Err(e) => {
                log::warn!("room {room} batch {}: {e}; dropped", queued.batch.batch_index);
                if !self.closing {
                    self.dispatch_distill(room, t)?;
                }
            }
        }
        Ok(())
    }

    fn record_insight(&mut self, summary: InsightSummary, t: Millis) -> Result<(), RuntimeError> {
        let room = summary.room_index;
        self.log.append(
            t,
            Event::Insight(InsightEvent {
                room,
                batch: summary.batch_index,
                suggestions: summary.suggestions.clone(),
                reasons: summary.reasons.clone(),
                narrative: summary.narrative.clone(),
            }),
        )?;
        for s in &summary.suggestions {
            self.prefs.add_option(s.clone());
        }
        self.record.timeline.push(TimelineEntry::Insight(summary.clone()));
        if !self.closing {
            if let Some(dest) = self.topology.downstream_of(room) {
                self.rooms[dest].inbox.push(PendingRelay {
                    source_room: room,
                    batch_index: summary.batch_index,
                    narrative: summary.narrative.clone(),
                });
                self.relay_at(dest, t)?;
            }
        }
        self.insights.insert(summary);
        Ok(())
    }

    // ------------------------------------------------------------ relay

    /// Speaks the upstream room's unrelayed narratives into `destination`,
    /// subject to the relay interval.
    pub fn relay(&mut self, destination: usize) -> Result<Option<Message>, RuntimeError> {
        let now = self.now();
        self.catch_up(now)?;
        self.relay_at(destination, now)
    }

    fn relay_at(&mut self, destination: usize, t: Millis) -> Result<Option<Message>, RuntimeError> {
        if !self.state.accepts_messages() || self.closing {
            return Ok(None);
        }
        let interval = self.config.settings.relay_interval;
        let Some(utterance) = self.rooms[destination].inbox.take(t, interval) else {
            return Ok(None);
        };
        let message = self.append_message(
            destination,
            ParticipantId::agent(destination),
            AuthorKind::SurrogateAgent,
            utterance.body,
            t,
        )?;
        self.log.append(
            t,
            Event::Relay(RelayEvent {
                from_room: utterance.source_room,
                to_room: destination,
                batches: utterance.batches,
                room_seq: message.room_seq,
            }),
        )?;
        Ok(Some(message))
    }

    // ------------------------------------------------------------ labeler

    /// Runs a labeling pass in `room` if one is due. Returns the snapshot
    /// when the pass completed synchronously.
    pub fn labeler_tick(&mut self, room: usize) -> Result<Option<PreferenceSnapshot>, RuntimeError> {
        let now = self.now();
        self.catch_up(now)?;
        self.labeler_tick_at(room, now, true)
    }

    fn labeler_tick_at(
        &mut self,
        room: usize,
        t: Millis,
        at_tick: bool,
    ) -> Result<Option<PreferenceSnapshot>, RuntimeError> {
        if !self.state.accepts_messages() || self.closing {
            return Ok(None);
        }
        let cfg = self.config.settings.labeler;
        let r = &self.rooms[room];
        if r.label_busy || r.unlabeled.is_empty() {
            return Ok(None);
        }
        let oldest = r.messages[r.unlabeled[0]].t;
        let due = r.unlabeled.len() >= cfg.message_threshold
            || (at_tick && (r.retry_due || t.saturating_sub(oldest) >= cfg.max_wait));
        if !due {
            return Ok(None);
        }
        let passes = self.rooms[room].next_pass;
        self.dispatch_label(room, t)?;
        let r = &self.rooms[room];
        Ok((r.next_pass > passes)
            .then(|| match self.record.timeline.last() {
                Some(TimelineEntry::Snapshot(s)) => Some(s.clone()),
                _ => None,
            })
            .flatten())
    }

    fn label_request(&self, room: usize) -> GatewayRequest {
        let cfg = self.config.settings.labeler;
        let r = &self.rooms[room];
        let first = r.unlabeled[0];
        let start = match cfg.mode {
            LabelMode::CarryForward => first.saturating_sub(cfg.context_messages),
            LabelMode::Recompute => 0,
        };
        let mut new = r.unlabeled.iter().copied().peekable();
        let payload = r.messages[start..]
            .iter()
            .enumerate()
            .map(|(offset, m)| {
                let role = if new.peek() == Some(&(start + offset)) {
                    new.next();
                    LineRole::New
                } else {
                    LineRole::Context
                };
                DialogLine::new(m.author.clone(), m.author_kind, m.body.clone(), role)
            })
            .collect();
        GatewayRequest::label(self.context(), room, r.next_pass, payload, r.members.clone())
    }

    fn dispatch_label(&mut self, room: usize, t: Millis) -> Result<(), RuntimeError> {
        let request = self.label_request(room);
        let covered = self.rooms[room].unlabeled.len();
        self.rooms[room].label_busy = true;
        self.rooms[room].retry_due = false;
        self.dispatch(Work::Label { room, covered }, request, t)
    }

    fn apply_label(
        &mut self,
        room: usize,
        covered: usize,
        result: Result<GatewayResponse, GatewayError>,
        t: Millis,
    ) -> Result<(), RuntimeError> {
        self.rooms[room].label_busy = false;
        let labels = result.and_then(|r| {
            r.into_labels()
                .ok_or_else(|| GatewayError::BackendError("label returned another kind".into()))
        });
        let labels = match labels {
            Ok(labels) => labels,
            Err(e) => {
                let r = &mut self.rooms[room];
                r.label_failures += 1;
                if r.label_failures >= 2 {
                    log::warn!("room {room} pass {}: {e}; dropping {covered} messages", r.next_pass);
                    r.unlabeled.drain(..covered);
                    r.label_failures = 0;
                } else {
                    log::warn!("room {room} pass {}: {e}; retrying at next tick", r.next_pass);
                    r.retry_due = true;
                }
                return Ok(());
            }
        };
        let scores = match self.config.settings.labeler.mode {
            LabelMode::CarryForward => labels,
            LabelMode::Recompute => self.complete_labels(room, labels),
        };
        let snapshot = PreferenceSnapshot {
            room_index: room,
            t,
            pass_index: self.rooms[room].next_pass,
            scores,
        };
        if let Err(e) = self.prefs.merge_snapshot(&snapshot) {
            // Gateway validation restricts labels to members and range, so
            // this indicates a bug; skip the pass rather than corrupt state.
            log::error!("room {room}: rejected snapshot: {e}");
            return Ok(());
        }
        let r = &mut self.rooms[room];
        r.unlabeled.drain(..covered);
        r.next_pass += 1;
        r.label_failures = 0;
        self.log.append(
            t,
            Event::Snapshot(SnapshotEvent {
                room,
                pass: snapshot.pass_index,
                labels: snapshot.scores.clone(),
            }),
        )?;
        let net = self.prefs.net_preference(t);
        self.log.append(t, Event::NetPreference(NetPreferenceEvent { values: net.per_option }))?;
        self.record.timeline.push(TimelineEntry::Snapshot(snapshot));
        Ok(())
    }

    /// Recompute mode: every member gets an explicit score for every option.
    fn complete_labels(&self, room: usize, labels: Vec<ScoreLabel>) -> Vec<ScoreLabel> {
        let mut options: Vec<String> = self.prefs.options().labels().to_vec();
        for l in &labels {
            if !options.contains(&l.option) {
                options.push(l.option.clone());
            }
        }
        let given: HashMap<(&str, &str), i8> =
            labels.iter().map(|l| ((l.user.as_str(), l.option.as_str()), l.score)).collect();
        self.rooms[room]
            .members
            .iter()
            .flat_map(|user| {
                options.iter().map(|o| ScoreLabel {
                    user: user.clone(),
                    option: o.clone(),
                    score: given.get(&(user.as_str(), o.as_str())).copied().unwrap_or(0),
                })
            })
            .collect()
    }

    // ------------------------------------------------------------ jobs

    fn dispatch(&mut self, work: Work, request: GatewayRequest, t: Millis) -> Result<(), RuntimeError> {
        match self.mode {
            JobMode::Inline => {
                let result = self.gateway.call(&request);
                self.apply(work, result, t)
            }
            JobMode::Deferred => {
                let id = self.next_job;
                self.next_job += 1;
                let room = match &work {
                    Work::Label { room, .. } | Work::Distill { room, .. } => *room,
                };
                self.inflight.insert(id, work);
                self.ready.push(Job { id, room, request });
                Ok(())
            }
        }
    }

    fn apply(
        &mut self,
        work: Work,
        result: Result<GatewayResponse, GatewayError>,
        t: Millis,
    ) -> Result<(), RuntimeError> {
        match work {
            Work::Label { room, covered } => self.apply_label(room, covered, result, t),
            Work::Distill { room, queued } => self.apply_distill(room, queued, result, t),
        }
    }

    /// Gateway calls queued in deferred mode, in dispatch order.
    pub fn take_jobs(&mut self) -> Vec<Job> {
        std::mem::take(&mut self.ready)
    }

    /// Applies the result of a job from [`Session::take_jobs`]. Results for
    /// jobs abandoned at close are ignored.
    pub fn complete_job(
        &mut self,
        id: u64,
        result: Result<GatewayResponse, GatewayError>,
    ) -> Result<(), RuntimeError> {
        let now = self.now();
        self.catch_up(now)?;
        let Some(work) = self.inflight.remove(&id) else {
            return Ok(());
        };
        self.apply(work, result, now)
    }

    // ------------------------------------------------------------ close

    fn close_at(&mut self, t: Millis) -> Result<(), RuntimeError> {
        self.closing = true;
        // Abandon in-flight work; its inputs are still pending and are
        // processed synchronously below.
        self.ready.clear();
        for (_, work) in std::mem::take(&mut self.inflight) {
            match work {
                Work::Label { room, .. } => self.rooms[room].label_busy = false,
                Work::Distill { room, queued } => {
                    self.rooms[room].distill_busy = false;
                    self.rooms[room].distill_queue.push_front(queued);
                }
            }
        }
        let mode = std::mem::replace(&mut self.mode, JobMode::Inline);

        for room in 0..self.rooms.len() {
            if let Some(batch) = self.rooms[room].batcher.flush() {
                self.log.append(
                    t,
                    Event::Batch(BatchEvent {
                        room,
                        batch: batch.batch_index,
                        trigger: batch.trigger,
                        room_seqs: batch.messages.iter().map(|m| m.room_seq).collect(),
                    }),
                )?;
                self.rooms[room].distill_queue.push_back(QueuedBatch { batch, attempts: 0 });
            }
            while let Some(queued) = self.rooms[room].distill_queue.pop_front() {
                let request = distill_request(self.context(), &queued.batch, self.rooms[room].members.clone());
                let result = self.gateway.call(&request);
                self.apply_distill(room, queued, result, t)?;
            }
        }
        for room in 0..self.rooms.len() {
            let mut attempts = 0;
            while !self.rooms[room].unlabeled.is_empty() && attempts < 2 {
                attempts += 1;
                let request = self.label_request(room);
                let covered = self.rooms[room].unlabeled.len();
                let result = self.gateway.call(&request);
                self.apply_label(room, covered, result, t)?;
            }
            self.rooms[room].unlabeled.clear();
        }
        self.mode = mode;

        let final_answer = self.prefs.final_answer().ok();
        let summaries = generate_argument_summaries(
            self.insights.reasons(),
            self.prefs.options().labels(),
            &self.gateway,
            &self.context(),
        );
        self.log.append(
            t,
            Event::Report(ReportEvent {
                final_answer: final_answer.clone(),
                summaries: summaries.clone(),
            }),
        )?;
        self.record.final_answer = final_answer.clone();
        self.record.summaries = summaries;
        self.set_state(t, SessionState::Closed)?;
        self.record.closed_at = Some(t);
        self.log.close()?;
        self.outbound.push_back(Outbound::Closed { final_answer, t });
        Ok(())
    }

    // ------------------------------------------------------------ analytics

    pub fn snapshot(&self) -> SessionSnapshot {
        let now = match self.record.closed_at {
            Some(t) => t,
            None => self.now(),
        };
        let top_choices = top_choice_series(&self.record, &[now]).pop().unwrap_or(TopChoiceSample {
            t: now,
            counts: Vec::new(),
            undecided: self.config.participants.len(),
        });
        let periods = self
            .record
            .periods
            .iter()
            .zip(period_reports(&self.record, self.record.final_answer.as_deref()))
            .map(|(p, r)| PeriodEntry {
                name: p.name.clone(),
                report: r.ok(),
            })
            .collect();
        SessionSnapshot {
            session_id: self.config.session_id.clone(),
            state: self.state,
            elapsed: now,
            duration: self.config.duration,
            net_preference: self.prefs.net_preference(now),
            top_choices,
            reason_tally: tally_reasons(self.insights.reasons()).ordered_by(self.prefs.options().labels()),
            periods,
            final_answer: self.record.final_answer.clone(),
            summaries: self.record.summaries.clone(),
        }
    }
}
