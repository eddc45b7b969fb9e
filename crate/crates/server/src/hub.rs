//! Session registry and per-participant channels.
//!
//! The hub knows nothing about sockets. [`Hub::connect`] hands back a
//! [`Connection`] for inbound text frames and an unbounded receiver of
//! outbound text frames; the websocket layer and the in-process swarm
//! harness both sit on top of that pair.
//!
//! Every session sits behind one mutex. Posting, admin transitions, job
//! completions and clock pumps all take it, so each session's events are
//! sequenced in a single order and fan-out happens inside the same critical
//! section, which keeps per-room delivery order equal to `room_seq` order.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use csi_core::analytics::{default_periods, PeriodDefinition};
use csi_core::clock::SessionClock;
use csi_core::eventlog::{EventLog, EventRecord};
use csi_core::export::{render_exports, Exports};
use csi_core::gateway::Gateway;
use csi_core::runtime::{
    JobMode, Outbound, RuntimeError, Session, SessionConfig, SessionSettings, SessionSnapshot, SessionState,
};
use csi_core::time::{Millis, ParticipantId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use crate::wire::{ClientFrame, ErrorCode, Joined, ServerFrame};

/// Outbound text frames, shared across a room's receivers.
pub type Outgoing = Arc<str>;

#[derive(Debug, thiserror::Error)]
pub enum HubError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    DuplicateSession(String),
    #[error("invalid token")]
    InvalidToken,
    #[error("admin credential required")]
    Unauthorized,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("cannot write event log: {0}")]
    Log(#[from] csi_core::eventlog::LogError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Clone, Debug)]
pub struct HubConfig {
    /// Bearer key for admin calls; `None` leaves them open.
    pub admin_key: Option<String>,
    /// Where `<session_id>.events.jsonl` files go; `None` keeps logs in memory.
    pub log_dir: Option<PathBuf>,
    /// How often wall-clock sessions fire due triggers.
    pub pump_interval: Duration,
}

impl Default for HubConfig {
    fn default() -> Self {
        HubConfig {
            admin_key: None,
            log_dir: None,
            pump_interval: Duration::from_millis(100),
        }
    }
}

/// Body of `POST /sessions`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub session_id: Option<String>,
    pub question: String,
    pub options: Vec<String>,
    /// Roster ids. Defaults to `p01..pNN` from `participant_count`.
    #[serde(default)]
    pub participants: Option<Vec<String>>,
    #[serde(default)]
    pub participant_count: Option<usize>,
    pub duration_secs: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub settings: Option<SessionSettings>,
    #[serde(default)]
    pub periods: Option<Vec<PeriodDefinition>>,
    /// Drive the clock by hand instead of the wall clock.
    #[serde(default)]
    pub simulated: bool,
}

impl CreateSession {
    pub fn from_config(config: &SessionConfig, simulated: bool) -> Self {
        CreateSession {
            session_id: Some(config.session_id.clone()),
            question: config.question.clone(),
            options: config.options.clone(),
            participants: Some(config.participants.iter().map(|p| p.0.clone()).collect()),
            participant_count: None,
            duration_secs: config.duration.0.div_ceil(1000),
            seed: config.seed,
            settings: Some(config.settings),
            periods: Some(config.periods.clone()),
            simulated,
        }
    }

    fn into_config(self) -> Result<(SessionConfig, bool), HubError> {
        let participants: Vec<ParticipantId> = match (self.participants, self.participant_count) {
            (Some(ids), _) => ids.into_iter().map(ParticipantId).collect(),
            (None, Some(n)) => (1..=n).map(|i| ParticipantId(format!("p{i:02}"))).collect(),
            (None, None) => return Err(HubError::BadRequest("participants or participant_count required".into())),
        };
        let session_id = self.session_id.unwrap_or_else(|| format!("s-{:08x}", rand::rng().random::<u32>()));
        if session_id.is_empty() || !session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(HubError::BadRequest(format!("session id {session_id:?} must be [A-Za-z0-9_-]+")));
        }
        let config = SessionConfig {
            session_id,
            question: self.question,
            options: self.options,
            participants,
            duration: Millis::from_secs(self.duration_secs),
            seed: self.seed,
            periods: self.periods.unwrap_or_else(default_periods),
            settings: self.settings.unwrap_or_default(),
        };
        Ok((config, self.simulated))
    }
}

/// Reply to `POST /sessions`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub state: SessionState,
    pub room_sizes: Vec<usize>,
    /// Participant id -> join token.
    pub tokens: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateReply {
    pub session_id: String,
    pub state: SessionState,
    pub final_answer: Option<String>,
}

struct Conn {
    id: u64,
    tx: UnboundedSender<Outgoing>,
}

struct Inner {
    session: Session,
    tokens: HashMap<String, ParticipantId>,
    conns: HashMap<ParticipantId, Conn>,
}

pub struct SessionHandle {
    id: String,
    inner: Mutex<Inner>,
    gateway: Arc<Gateway>,
    /// Runtime that runs deferred gateway jobs; `None` for inline sessions.
    runtime: Option<tokio::runtime::Handle>,
}

impl SessionHandle {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` on the session, then delivers its outbound frames and
    /// launches any gateway jobs it queued.
    fn with<T>(self: &Arc<Self>, f: impl FnOnce(&mut Inner) -> T) -> T {
        let mut inner = self.lock();
        let out = f(&mut inner);
        self.flush(&mut inner);
        out
    }

    fn flush(self: &Arc<Self>, inner: &mut Inner) {
        for item in inner.session.drain_outbound() {
            match item {
                Outbound::Message(m) => {
                    let room = m.room_index;
                    let text: Outgoing = ServerFrame::chat(m).to_text(&self.id).into();
                    for p in inner.session.room_members(room) {
                        if let Some(c) = inner.conns.get(p) {
                            let _ = c.tx.send(text.clone());
                        }
                    }
                }
                Outbound::State { state, t } => broadcast(inner, ServerFrame::State { state, t }.to_text(&self.id)),
                Outbound::Closed { final_answer, t } => {
                    broadcast(inner, ServerFrame::Closed { final_answer, t }.to_text(&self.id))
                }
            }
        }
        let jobs = inner.session.take_jobs();
        if jobs.is_empty() {
            return;
        }
        let Some(rt) = &self.runtime else {
            log::error!("session {} queued jobs without a runtime", self.id);
            return;
        };
        for job in jobs {
            let handle = Arc::clone(self);
            rt.spawn_blocking(move || {
                let result = handle.gateway.call(&job.request);
                handle.with(|inner| {
                    if let Err(e) = inner.session.complete_job(job.id, result) {
                        log::error!("session {}: job {} failed to apply: {e}", handle.id, job.id);
                    }
                });
            });
        }
    }

    fn send_to(&self, inner: &Inner, participant: &ParticipantId, conn_id: u64, frame: ServerFrame) {
        if let Some(c) = inner.conns.get(participant).filter(|c| c.id == conn_id) {
            let _ = c.tx.send(frame.to_text(&self.id).into());
        }
    }
}

fn broadcast(inner: &Inner, text: String) {
    let text: Outgoing = text.into();
    for c in inner.conns.values() {
        let _ = c.tx.send(text.clone());
    }
}

/// One participant's live channel. Dropping it detaches the participant
/// unless a newer connection already replaced it.
pub struct Connection {
    pub participant: ParticipantId,
    pub room: usize,
    id: u64,
    session: Arc<SessionHandle>,
}

impl Connection {
    pub fn session_id(&self) -> &str {
        &self.session.id
    }

    /// Handles one inbound text frame. Replies, including errors, go to this
    /// connection's receiver; the connection stays open either way.
    pub fn handle_text(&self, text: &str) {
        let frame = match ClientFrame::parse(text) {
            Ok((_, f)) => f,
            Err(e) => {
                let lock = self.session.lock();
                self.session
                    .send_to(&lock, &self.participant, self.id, ServerFrame::error(e.code(), e.to_string()));
                return;
            }
        };
        self.session.with(|inner| {
            let reply = match frame {
                ClientFrame::Join { .. } => Some(ServerFrame::error(ErrorCode::AlreadyJoined, "already joined")),
                ClientFrame::Snapshot {} => Some(ServerFrame::Snapshot(
                    serde_json::to_value(inner.session.snapshot()).expect("snapshots serialize"),
                )),
                ClientFrame::Send { body } => {
                    let superseded = inner.conns.get(&self.participant).is_none_or(|c| c.id != self.id);
                    if superseded {
                        None
                    } else {
                        if !inner.session.is_simulated() {
                            if let Err(e) = inner.session.pump() {
                                log::error!("session {}: {e}", self.session.id);
                            }
                        }
                        inner.session.post_message(&self.participant, &body).err().map(post_error)
                    }
                }
            };
            if let Some(frame) = reply {
                self.session.send_to(inner, &self.participant, self.id, frame);
            }
        });
    }
}

fn post_error(e: RuntimeError) -> ServerFrame {
    let code = match e {
        RuntimeError::EmptyBody => ErrorCode::EmptyBody,
        RuntimeError::BodyTooLong => ErrorCode::BodyTooLong,
        RuntimeError::SessionNotRunning => ErrorCode::SessionNotRunning,
        _ => ErrorCode::Internal,
    };
    ServerFrame::error(code, e.to_string())
}

impl Drop for Connection {
    fn drop(&mut self) {
        let mut inner = self.session.lock();
        if inner.conns.get(&self.participant).is_some_and(|c| c.id == self.id) {
            inner.conns.remove(&self.participant);
        }
    }
}

pub struct Hub {
    config: HubConfig,
    gateway: Arc<Gateway>,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
    next_conn: AtomicU64,
}

impl Hub {
    pub fn new(config: HubConfig, gateway: Arc<Gateway>) -> Arc<Self> {
        Arc::new(Hub {
            config,
            gateway,
            sessions: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn authorize(&self, bearer: Option<&str>) -> Result<(), HubError> {
        match &self.config.admin_key {
            None => Ok(()),
            Some(key) if bearer == Some(key.as_str()) => Ok(()),
            Some(_) => Err(HubError::Unauthorized),
        }
    }

    fn handle(&self, session_id: &str) -> Result<Arc<SessionHandle>, HubError> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(session_id)
            .cloned()
            .ok_or_else(|| HubError::UnknownSession(session_id.to_owned()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn create(self: &Arc<Self>, request: CreateSession) -> Result<Created, HubError> {
        self.create_with_gateway(request, Arc::clone(&self.gateway))
    }

    /// Like [`Hub::create`] but with a gateway just for this session.
    /// Wall-clock sessions must be created inside a tokio runtime.
    pub fn create_with_gateway(
        self: &Arc<Self>,
        request: CreateSession,
        gateway: Arc<Gateway>,
    ) -> Result<Created, HubError> {
        let (config, simulated) = request.into_config()?;
        let id = config.session_id.clone();
        let mut sessions = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        if sessions.contains_key(&id) {
            return Err(HubError::DuplicateSession(id));
        }
        let log = match &self.config.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(csi_core::eventlog::LogError::from)?;
                EventLog::create(dir.join(format!("{id}.events.jsonl")))?
            }
            None => EventLog::in_memory(),
        };
        let (clock, mode, runtime) = if simulated {
            (SessionClock::simulated(), JobMode::Inline, None)
        } else {
            let rt = tokio::runtime::Handle::try_current()
                .map_err(|_| HubError::BadRequest("wall-clock sessions need a tokio runtime".into()))?;
            (SessionClock::wall(), JobMode::Deferred, Some(rt))
        };
        let session = Session::create_with(config, Arc::clone(&gateway), clock, log, mode)?;
        let mut rng = rand::rng();
        let mut tokens = HashMap::new();
        let mut listed = BTreeMap::new();
        for p in &session.config().participants {
            let token = format!("{:032x}", rng.random::<u128>());
            listed.insert(p.0.clone(), token.clone());
            tokens.insert(token, p.clone());
        }
        let created = Created {
            session_id: id.clone(),
            state: session.state(),
            room_sizes: session.topology().room_sizes.clone(),
            tokens: listed,
        };
        let handle = Arc::new(SessionHandle {
            id: id.clone(),
            inner: Mutex::new(Inner {
                session,
                tokens,
                conns: HashMap::new(),
            }),
            gateway,
            runtime,
        });
        sessions.insert(id, handle);
        Ok(created)
    }

    pub fn start(self: &Arc<Self>, session_id: &str) -> Result<StateReply, HubError> {
        let handle = self.handle(session_id)?;
        let reply = handle.with(|inner| {
            inner.session.start()?;
            Ok::<_, HubError>(state_reply(inner))
        })?;
        if let Some(rt) = &handle.runtime {
            let interval = self.config.pump_interval;
            let h = Arc::clone(&handle);
            rt.spawn(pump_loop(h, interval));
        }
        Ok(reply)
    }

    pub fn close(self: &Arc<Self>, session_id: &str) -> Result<StateReply, HubError> {
        let handle = self.handle(session_id)?;
        handle.with(|inner| {
            if !inner.session.is_simulated() {
                inner.session.pump()?;
            }
            if inner.session.state() != SessionState::Closed {
                inner.session.close()?;
            } else {
                return Err(HubError::Runtime(RuntimeError::IllegalTransition {
                    from: SessionState::Closed,
                    to: SessionState::Closed,
                }));
            }
            Ok(state_reply(inner))
        })
    }

    pub fn state(&self, session_id: &str) -> Result<StateReply, HubError> {
        let handle = self.handle(session_id)?;
        let inner = handle.lock();
        Ok(state_reply(&inner))
    }

    pub fn snapshot(self: &Arc<Self>, session_id: &str) -> Result<SessionSnapshot, HubError> {
        let handle = self.handle(session_id)?;
        handle.with(|inner| {
            if !inner.session.is_simulated() {
                inner.session.pump()?;
            }
            Ok(inner.session.snapshot())
        })
    }

    /// Moves a simulated session's clock to `t`, firing due triggers.
    pub fn advance_to(self: &Arc<Self>, session_id: &str, t: Millis) -> Result<(), HubError> {
        let handle = self.handle(session_id)?;
        handle.with(|inner| Ok(inner.session.advance_to(t)?))
    }

    pub fn records(&self, session_id: &str) -> Result<Vec<EventRecord>, HubError> {
        let handle = self.handle(session_id)?;
        let inner = handle.lock();
        Ok(inner.session.log().records().to_vec())
    }

    pub fn exports(&self, session_id: &str) -> Result<Exports, HubError> {
        let handle = self.handle(session_id)?;
        let inner = handle.lock();
        Ok(render_exports(inner.session.record()))
    }

    /// Attaches a participant. The joined frame and the room backlog are
    /// queued before any live frame. A second connection for the same
    /// participant supersedes the first, whose receiver then ends.
    pub fn connect(
        self: &Arc<Self>,
        session_id: &str,
        token: &str,
    ) -> Result<(Connection, UnboundedReceiver<Outgoing>), HubError> {
        let handle = self.handle(session_id)?;
        let id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = unbounded_channel();
        let participant = handle.with(|inner| {
            let participant = inner.tokens.get(token).cloned().ok_or(HubError::InvalidToken)?;
            if !inner.session.is_simulated() {
                inner.session.pump()?;
            }
            let s = &inner.session;
            let room = s.room_of(&participant).expect("every roster member has a room");
            let joined = Joined {
                participant_id: participant.0.clone(),
                room_index: room,
                room_members: s.room_members(room).iter().map(|p| p.0.clone()).collect(),
                roster_size: s.config().participants.len(),
                agent: format!("agent-{room}"),
                state: s.state(),
                elapsed: s.now(),
                duration: s.config().duration,
            };
            let _ = tx.send(ServerFrame::Joined(joined).to_text(&handle.id).into());
            for m in s.room_messages(room) {
                let _ = tx.send(ServerFrame::chat(m.clone()).to_text(&handle.id).into());
            }
            if s.state() == SessionState::Closed {
                let closed = ServerFrame::Closed {
                    final_answer: s.final_answer().map(str::to_owned),
                    t: s.record().closed_at.unwrap_or(s.now()),
                };
                let _ = tx.send(closed.to_text(&handle.id).into());
            }
            if let Some(old) = inner.conns.insert(participant.clone(), Conn { id, tx }) {
                let frame = ServerFrame::error(ErrorCode::Superseded, "a newer connection took over");
                let _ = old.tx.send(frame.to_text(&handle.id).into());
            }
            Ok::<_, HubError>((participant, room))
        })?;
        Ok((
            Connection {
                participant: participant.0,
                room: participant.1,
                id,
                session: handle,
            },
            rx,
        ))
    }
}

fn state_reply(inner: &Inner) -> StateReply {
    StateReply {
        session_id: inner.session.session_id().to_owned(),
        state: inner.session.state(),
        final_answer: inner.session.final_answer().map(str::to_owned),
    }
}

async fn pump_loop(handle: Arc<SessionHandle>, interval: Duration) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        ticker.tick().await;
        let h = Arc::clone(&handle);
        // Closing runs the final distill and label calls inline.
        let done = tokio::task::spawn_blocking(move || {
            h.with(|inner| {
                if let Err(e) = inner.session.pump() {
                    log::error!("session {}: {e}", h.id);
                }
                inner.session.state() == SessionState::Closed
            })
        })
        .await
        .unwrap_or(true);
        if done {
            break;
        }
    }
}
