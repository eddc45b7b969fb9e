//! Session hub: lifecycle, tokens, fan-out, reconnects, frame errors.

use std::collections::BTreeSet;
use std::sync::Arc;

use csi_core::gateway::Gateway;
use csi_core::runtime::{RuntimeError, SessionState};
use csi_core::time::Millis;
use csi_server::hub::{CreateSession, Hub, HubConfig, HubError, Outgoing};
use csi_server::wire::{ClientFrame, ErrorCode, ServerFrame};
use tokio::sync::mpsc::UnboundedReceiver;

fn hub() -> Arc<Hub> {
    Hub::new(HubConfig::default(), Arc::new(Gateway::heuristic()))
}

fn request(id: &str, n: usize) -> CreateSession {
    CreateSession {
        session_id: Some(id.into()),
        question: "Which?".into(),
        options: vec!["Red".into(), "Blue".into()],
        participant_count: Some(n),
        duration_secs: 120,
        seed: 1,
        simulated: true,
        ..CreateSession::default()
    }
}

fn frames(rx: &mut UnboundedReceiver<Outgoing>) -> Vec<ServerFrame> {
    let mut out = Vec::new();
    while let Ok(text) = rx.try_recv() {
        let (_, frame) = ServerFrame::parse(&text).unwrap();
        out.push(frame);
    }
    out
}

fn send(body: &str, id: &str) -> String {
    ClientFrame::Send { body: body.into() }.to_text(id)
}

#[test]
fn tokens_are_distinct_per_participant() {
    let h = hub();
    let created = h.create(request("a", 12)).unwrap();
    assert_eq!(created.state, SessionState::Created);
    assert_eq!(created.tokens.len(), 12);
    assert_eq!(created.room_sizes.iter().sum::<usize>(), 12);
    let distinct: BTreeSet<&String> = created.tokens.values().collect();
    assert_eq!(distinct.len(), 12);
    for t in created.tokens.values() {
        assert_eq!(t.len(), 32);
        assert!(t.chars().all(|c| c.is_ascii_hexdigit()));
    }
    assert!(matches!(h.create(request("a", 12)), Err(HubError::DuplicateSession(_))));
    assert!(matches!(h.create(request("bad id", 12)), Err(HubError::BadRequest(_))));
    let mut none = request("b", 12);
    none.participant_count = None;
    assert!(matches!(h.create(none), Err(HubError::BadRequest(_))));
}

#[test]
fn connect_rejects_unknown_session_and_token() {
    let h = hub();
    h.create(request("s", 8)).unwrap();
    assert!(matches!(h.connect("nope", "x"), Err(HubError::UnknownSession(_))));
    assert!(matches!(h.connect("s", "0123"), Err(HubError::InvalidToken)));
    assert!(matches!(h.snapshot("nope"), Err(HubError::UnknownSession(_))));
}

#[test]
fn lifecycle_reaches_every_connection() {
    let h = hub();
    let created = h.create(request("s", 10)).unwrap();
    let mut rxs: Vec<_> = created.tokens.values().map(|t| h.connect("s", t).unwrap()).collect();
    for (_, rx) in &mut rxs {
        assert!(matches!(frames(rx)[..], [ServerFrame::Joined(ref j)] if j.state == SessionState::Created));
    }
    h.start("s").unwrap();
    assert!(matches!(
        h.start("s"),
        Err(HubError::Runtime(RuntimeError::IllegalTransition { from: SessionState::Running, .. }))
    ));
    h.advance_to("s", Millis::from_secs(120)).unwrap();
    assert_eq!(h.state("s").unwrap().state, SessionState::Closed);
    assert!(h.close("s").is_err());
    for (_, rx) in &mut rxs {
        let got = frames(rx);
        let states: Vec<SessionState> = got
            .iter()
            .filter_map(|f| match f {
                ServerFrame::State { state, .. } => Some(*state),
                _ => None,
            })
            .collect();
        assert_eq!(states.first(), Some(&SessionState::Running));
        assert!(matches!(got.last(), Some(ServerFrame::Closed { t, .. }) if *t == Millis::from_secs(120)));
    }
}

#[test]
fn messages_stay_in_their_room() {
    let h = hub();
    let created = h.create(request("s", 20)).unwrap();
    let mut conns: Vec<_> = created.tokens.values().map(|t| h.connect("s", t).unwrap()).collect();
    h.start("s").unwrap();
    for (_, rx) in &mut conns {
        frames(rx);
    }
    let speaker_room = conns[0].0.room;
    conns[0].0.handle_text(&send("hello room", "s"));
    for (conn, rx) in &mut conns {
        let got = frames(rx);
        let chat: Vec<_> = got.iter().filter(|f| matches!(f, ServerFrame::Message(_))).collect();
        if conn.room == speaker_room {
            assert!(matches!(chat[..], [ServerFrame::Message(m)] if m.body == "hello room" && m.room_seq == 1));
        } else {
            assert!(chat.is_empty(), "room {} saw {chat:?}", conn.room);
        }
    }
}

#[test]
fn bad_frames_get_errors_and_the_connection_survives() {
    let h = hub();
    let created = h.create(request("s", 8)).unwrap();
    let (conn, mut rx) = h.connect("s", created.tokens.values().next().unwrap()).unwrap();
    frames(&mut rx);
    let code = |rx: &mut UnboundedReceiver<Outgoing>| match frames(rx).pop() {
        Some(ServerFrame::Error { code, .. }) => Some(code),
        _ => None,
    };

    conn.handle_text(&send("too early", "s"));
    assert_eq!(code(&mut rx), Some(ErrorCode::SessionNotRunning));
    h.start("s").unwrap();
    frames(&mut rx);

    conn.handle_text(r#"{"type":"shout","session_id":"s","body":{}}"#);
    assert_eq!(code(&mut rx), Some(ErrorCode::UnknownType));
    conn.handle_text("not json");
    assert_eq!(code(&mut rx), Some(ErrorCode::BadFrame));
    conn.handle_text(r#"{"type":"send","session_id":"s","body":{"text":1}}"#);
    assert_eq!(code(&mut rx), Some(ErrorCode::BadFrame));
    conn.handle_text(&send("   ", "s"));
    assert_eq!(code(&mut rx), Some(ErrorCode::EmptyBody));
    conn.handle_text(&send(&"x".repeat(2001), "s"));
    assert_eq!(code(&mut rx), Some(ErrorCode::BodyTooLong));
    conn.handle_text(&ClientFrame::Join { token: "t".into() }.to_text("s"));
    assert_eq!(code(&mut rx), Some(ErrorCode::AlreadyJoined));

    conn.handle_text(&send(&"y".repeat(2000), "s"));
    assert!(matches!(frames(&mut rx)[..], [ServerFrame::Message(ref m)] if m.body.len() == 2000));

    conn.handle_text(&ClientFrame::Snapshot {}.to_text("s"));
    match frames(&mut rx).pop() {
        Some(ServerFrame::Snapshot(v)) => {
            assert_eq!(v["session_id"], "s");
            assert_eq!(v["state"], "running");
        }
        other => panic!("expected snapshot, got {other:?}"),
    }
}

#[test]
fn reconnect_supersedes_and_replays_backlog_in_order() {
    let h = hub();
    let created = h.create(request("s", 8)).unwrap();
    let token = created.tokens.values().next().unwrap().clone();
    let (first, mut old_rx) = h.connect("s", &token).unwrap();
    h.start("s").unwrap();
    for i in 0..6 {
        h.advance_to("s", Millis::from_secs(i + 1)).unwrap();
        first.handle_text(&send(&format!("line {i}"), "s"));
    }
    let before: Vec<u64> = frames(&mut old_rx)
        .into_iter()
        .filter_map(|f| match f {
            ServerFrame::Message(m) | ServerFrame::AgentMessage(m) => Some(m.room_seq),
            _ => None,
        })
        .collect();

    let (second, mut new_rx) = h.connect("s", &token).unwrap();
    // The old channel gets one superseded error, then ends.
    assert!(matches!(
        frames(&mut old_rx)[..],
        [ServerFrame::Error { code: ErrorCode::Superseded, .. }]
    ));
    assert!(old_rx.try_recv().is_err());
    // Sends through the stale connection are ignored.
    first.handle_text(&send("ghost", "s"));
    drop(first);

    let replay = frames(&mut new_rx);
    assert!(matches!(replay[0], ServerFrame::Joined(ref j) if j.state == SessionState::Running));
    let seqs: Vec<u64> = replay[1..]
        .iter()
        .map(|f| match f {
            ServerFrame::Message(m) | ServerFrame::AgentMessage(m) => m.room_seq,
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    assert_eq!(seqs, before);
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());

    // Dropping the stale handle did not detach the new one.
    second.handle_text(&send("still here", "s"));
    assert!(matches!(frames(&mut new_rx)[..], [ServerFrame::Message(ref m)] if m.body == "still here"));
}

#[test]
fn joining_a_closed_session_gets_backlog_then_closed() {
    let h = hub();
    let created = h.create(request("s", 8)).unwrap();
    h.start("s").unwrap();
    h.close("s").unwrap();
    let (_c, mut rx) = h.connect("s", created.tokens.values().next().unwrap()).unwrap();
    let got = frames(&mut rx);
    assert!(matches!(got.first(), Some(ServerFrame::Joined(_))));
    assert!(matches!(got.last(), Some(ServerFrame::Closed { .. })));
}

#[test]
fn admin_key_is_checked() {
    let open = hub();
    assert!(open.authorize(None).is_ok());
    let locked = Hub::new(
        HubConfig {
            admin_key: Some("k".into()),
            ..HubConfig::default()
        },
        Arc::new(Gateway::heuristic()),
    );
    assert!(locked.authorize(Some("k")).is_ok());
    assert!(matches!(locked.authorize(Some("j")), Err(HubError::Unauthorized)));
    assert!(matches!(locked.authorize(None), Err(HubError::Unauthorized)));
}

#[test]
fn log_file_is_written_per_session() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hub::new(
        HubConfig {
            log_dir: Some(dir.path().to_owned()),
            ..HubConfig::default()
        },
        Arc::new(Gateway::heuristic()),
    );
    h.create(request("logged", 8)).unwrap();
    h.start("logged").unwrap();
    h.close("logged").unwrap();
    let path = dir.path().join("logged.events.jsonl");
    let exports = csi_core::replay::replay(&path).unwrap();
    assert_eq!(exports, h.exports("logged").unwrap());
}
