//! Running bot swarms through the service surface.
//!
//! [`run_swarm`] plays scripts against a simulated-clock session through the
//! hub's channels, which is deterministic and fast. [`run_swarm_realtime`]
//! serves the HTTP and websocket API on a loopback port and drives every bot
//! as an independent websocket client on the wall clock, measuring
//! post-to-broadcast latency and checking delivery.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use csi_core::eventlog::EventRecord;
use csi_core::gateway::Gateway;
use csi_core::message::Message;
use csi_core::runtime::{SessionConfig, SessionState};
use csi_core::script::{check_roster, merged_timeline, BotScript, ScriptError};
use csi_core::time::ParticipantId;
use futures::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::hub::{CreateSession, Created, Hub, HubError, Outgoing, StateReply};
use crate::wire::{ClientFrame, ServerFrame};

#[derive(Debug, thiserror::Error)]
pub enum SwarmError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("bot {bot}: {message}")]
    Protocol { bot: String, message: String },
}

/// What a simulated swarm run leaves behind.
pub struct SwarmRun {
    pub session_id: String,
    pub records: Vec<EventRecord>,
    pub final_answer: Option<String>,
    /// Every frame each bot received, in arrival order.
    pub received: BTreeMap<ParticipantId, Vec<ServerFrame>>,
}

fn drain(rx: &mut tokio::sync::mpsc::UnboundedReceiver<Outgoing>, into: &mut Vec<ServerFrame>) {
    while let Ok(text) = rx.try_recv() {
        match ServerFrame::parse(&text) {
            Ok((_, f)) => into.push(f),
            Err(e) => log::error!("unparseable server frame {text}: {e}"),
        }
    }
}

/// Plays `bots` against a fresh simulated-clock session created on `hub`,
/// every bot attached through its own channel. Runs until the session closes.
pub fn run_swarm(
    hub: &Arc<Hub>,
    config: &SessionConfig,
    gateway: Arc<Gateway>,
    bots: &[BotScript],
) -> Result<SwarmRun, SwarmError> {
    check_roster(bots, &config.participants)?;
    let created = hub.create_with_gateway(CreateSession::from_config(config, true), gateway)?;
    let id = created.session_id.clone();

    let mut conns = BTreeMap::new();
    for b in bots {
        let (conn, rx) = hub.connect(&id, &created.tokens[b.bot.as_str()])?;
        conns.insert(b.bot.clone(), (conn, rx, Vec::new()));
    }
    hub.start(&id)?;
    for (t, bot, text) in merged_timeline(bots, config.duration) {
        hub.advance_to(&id, t)?;
        if !hub.state(&id)?.state.accepts_messages() {
            break;
        }
        let (conn, rx, seen) = conns.get_mut(&bot).expect("roster checked");
        conn.handle_text(&ClientFrame::Send { body: text }.to_text(&id));
        drain(rx, seen);
    }
    hub.advance_to(&id, config.duration)?;

    let mut received = BTreeMap::new();
    for (bot, (conn, mut rx, mut seen)) in conns {
        drain(&mut rx, &mut seen);
        drop(conn);
        received.insert(bot, seen);
    }
    let state = hub.state(&id)?;
    Ok(SwarmRun {
        session_id: id.clone(),
        records: hub.records(&id)?,
        final_answer: state.final_answer,
        received,
    })
}

/// Delivery and latency measurements from a real-time run.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub session_id: String,
    pub bots: usize,
    pub sent: usize,
    pub rejected: usize,
    pub elapsed: Duration,
    /// Post-to-broadcast latency of every accepted send, as seen by its author.
    pub latencies: Vec<Duration>,
    /// Chat frames each bot received, by room_seq.
    pub received: BTreeMap<String, Vec<u64>>,
    /// Bots whose chat frames skipped or repeated a room_seq.
    pub order_violations: Vec<String>,
    /// Bots that did not receive every message of their room.
    pub missing: Vec<String>,
    pub final_answer: Option<String>,
    pub records: Vec<EventRecord>,
}

impl LoadReport {
    pub fn rate(&self) -> f64 {
        self.sent as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    /// Nearest-rank percentile of the latencies, `q` in `(0, 1]`.
    pub fn latency_percentile(&self, q: f64) -> Option<Duration> {
        let mut v = self.latencies.clone();
        if v.is_empty() {
            return None;
        }
        v.sort();
        let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Some(v[rank - 1])
    }
}

struct BotOutcome {
    bot: String,
    sent: usize,
    rejected: usize,
    latencies: Vec<Duration>,
    seqs: Vec<u64>,
}

async fn post<T: serde::de::DeserializeOwned>(
    client: &reqwest::Client,
    url: String,
    key: Option<&str>,
    body: Option<&CreateSession>,
) -> Result<T, SwarmError> {
    let mut req = client.post(url);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    if let Some(b) = body {
        req = req.json(b);
    }
    let resp = req.send().await.map_err(|e| SwarmError::Transport(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.text().await.unwrap_or_default();
        return Err(SwarmError::Transport(format!("{status}: {text}")));
    }
    resp.json().await.map_err(|e| SwarmError::Transport(e.to_string()))
}

/// Serves `hub` on a loopback port and runs `bots` as websocket clients on
/// the wall clock. The session is created over HTTP from `config`.
pub async fn run_swarm_realtime(
    hub: Arc<Hub>,
    config: &SessionConfig,
    bots: &[BotScript],
) -> Result<LoadReport, SwarmError> {
    check_roster(bots, &config.participants)?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| SwarmError::Transport(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| SwarmError::Transport(e.to_string()))?;
    let app = crate::http::router(Arc::clone(&hub));
    let server = tokio::spawn(async move { axum::serve(listener, app).await });

    let key = hub.config().admin_key.clone();
    let client = reqwest::Client::new();
    let base = format!("http://{addr}");
    let created: Created = post(
        &client,
        format!("{base}/sessions"),
        key.as_deref(),
        Some(&CreateSession::from_config(config, false)),
    )
    .await?;
    let id = created.session_id.clone();

    let duration = config.duration;
    // Everyone joins, the session starts, then the bots' clocks start.
    let ready = Arc::new(tokio::sync::Barrier::new(bots.len() + 1));
    let go = Arc::new(tokio::sync::Barrier::new(bots.len() + 1));
    let mut tasks = Vec::new();
    for b in bots {
        let token = created.tokens[b.bot.as_str()].clone();
        let timeline = b.realize(duration);
        let gates = (Arc::clone(&ready), Arc::clone(&go));
        tasks.push(tokio::spawn(run_bot(addr, id.clone(), b.bot.0.clone(), token, timeline, gates)));
    }
    if tokio::time::timeout(Duration::from_secs(30), ready.wait()).await.is_err() {
        return Err(SwarmError::Transport("bots failed to join within 30 s".into()));
    }
    let started = Instant::now();
    let _: StateReply = post(&client, format!("{base}/sessions/{id}/start"), key.as_deref(), None).await?;
    go.wait().await;

    let mut report = LoadReport {
        session_id: id.clone(),
        bots: bots.len(),
        ..LoadReport::default()
    };
    for task in tasks {
        let outcome = task.await.map_err(|e| SwarmError::Transport(e.to_string()))??;
        report.sent += outcome.sent;
        report.rejected += outcome.rejected;
        report.latencies.extend(outcome.latencies);
        if outcome.seqs.windows(2).any(|w| w[1] != w[0] + 1) || outcome.seqs.first().is_some_and(|s| *s != 1) {
            report.order_violations.push(outcome.bot.clone());
        }
        report.received.insert(outcome.bot, outcome.seqs);
    }
    report.elapsed = started.elapsed();
    server.abort();

    report.records = hub.records(&id)?;
    report.final_answer = hub.state(&id)?.final_answer;
    // Every member must have seen every message of their room.
    let mut per_room: BTreeMap<usize, u64> = BTreeMap::new();
    for r in &report.records {
        if let csi_core::eventlog::Event::Message(m) = &r.event {
            let e = per_room.entry(m.room_index).or_default();
            *e = (*e).max(m.room_seq);
        }
    }
    for a in created_assignments(&report.records) {
        let want = per_room.get(&a.1).copied().unwrap_or(0);
        let got = report.received.get(&a.0).map(|s| s.len() as u64).unwrap_or(0);
        if got != want {
            report.missing.push(a.0);
        }
    }
    Ok(report)
}

fn created_assignments(records: &[EventRecord]) -> Vec<(String, usize)> {
    match records.first().map(|r| &r.event) {
        Some(csi_core::eventlog::Event::SessionCreated(c)) => {
            c.assignments.iter().map(|a| (a.participant_id.0.clone(), a.room_index)).collect()
        }
        _ => Vec::new(),
    }
}

async fn run_bot(
    addr: SocketAddr,
    session_id: String,
    bot: String,
    token: String,
    timeline: Vec<csi_core::script::Utterance>,
    (ready, go): (Arc<tokio::sync::Barrier>, Arc<tokio::sync::Barrier>),
) -> Result<BotOutcome, SwarmError> {
    let protocol = |message: String| SwarmError::Protocol {
        bot: bot.clone(),
        message,
    };
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws"))
        .await
        .map_err(|e| SwarmError::Transport(e.to_string()))?;
    let (mut sink, mut stream) = ws.split();
    sink.send(WsMessage::Text(ClientFrame::Join { token }.to_text(&session_id).into()))
        .await
        .map_err(|e| SwarmError::Transport(e.to_string()))?;
    match stream.next().await {
        Some(Ok(WsMessage::Text(t))) => match ServerFrame::parse(&t) {
            Ok((_, ServerFrame::Joined(_))) => {}
            other => return Err(protocol(format!("expected joined, got {other:?}"))),
        },
        other => return Err(protocol(format!("expected joined, got {other:?}"))),
    }

    // Send instants of this bot's posts not yet echoed back.
    let pending: Arc<std::sync::Mutex<VecDeque<Instant>>> = Arc::default();
    let reader = {
        let pending = Arc::clone(&pending);
        let bot = bot.clone();
        tokio::spawn(async move {
            let mut latencies = Vec::new();
            let mut seqs = Vec::new();
            let mut rejected = 0;
            while let Some(Ok(msg)) = stream.next().await {
                let WsMessage::Text(t) = msg else { continue };
                let Ok((_, frame)) = ServerFrame::parse(&t) else { continue };
                match frame {
                    ServerFrame::Message(m) | ServerFrame::AgentMessage(m) => {
                        seqs.push(m.room_seq);
                        if is_own(&m, &bot) {
                            if let Some(at) = pending.lock().unwrap().pop_front() {
                                latencies.push(at.elapsed());
                            }
                        }
                    }
                    ServerFrame::Error { .. } => {
                        rejected += 1;
                        pending.lock().unwrap().pop_front();
                    }
                    ServerFrame::Closed { .. } => break,
                    _ => {}
                }
            }
            (latencies, seqs, rejected)
        })
    };

    ready.wait().await;
    go.wait().await;
    let origin = tokio::time::Instant::now();
    let mut sent = 0;
    for u in timeline {
        tokio::time::sleep_until(origin + Duration::from_millis(u.t.0)).await;
        pending.lock().unwrap().push_back(Instant::now());
        let frame = ClientFrame::Send { body: u.text }.to_text(&session_id);
        if sink.send(WsMessage::Text(frame.into())).await.is_err() {
            break;
        }
        sent += 1;
    }
    let (latencies, seqs, rejected) = reader.await.map_err(|e| SwarmError::Transport(e.to_string()))?;
    let _ = sink.send(WsMessage::Close(None)).await;
    Ok(BotOutcome {
        bot,
        sent,
        rejected,
        latencies,
        seqs,
    })
}

fn is_own(m: &Message, bot: &str) -> bool {
    m.is_human() && m.author.as_str() == bot
}

/// Session state helper for callers holding only a report.
pub fn closed(report: &LoadReport) -> bool {
    report.records.iter().any(|r| {
        matches!(&r.event, csi_core::eventlog::Event::Lifecycle(l) if l.state == SessionState::Closed)
    })
}
