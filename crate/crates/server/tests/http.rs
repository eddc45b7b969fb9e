//! The HTTP admin routes and the websocket endpoint over loopback.

use std::sync::Arc;
use std::time::Duration;

use csi_core::gateway::Gateway;
use csi_server::hub::{Created, Hub, HubConfig};
use csi_server::wire::{ClientFrame, ErrorCode, ServerFrame};
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message as WsMessage;

const KEY: &str = "admin-secret";

async fn serve() -> String {
    let hub = Hub::new(
        HubConfig {
            admin_key: Some(KEY.into()),
            ..HubConfig::default()
        },
        Arc::new(Gateway::heuristic()),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, csi_server::http::router(hub)).await });
    format!("127.0.0.1:{}", addr.port())
}

fn body(id: &str) -> Value {
    json!({"session_id": id, "question": "Which?", "options": ["Red", "Blue"], "participant_count": 8, "duration_secs": 60})
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn next_frame(ws: &mut Ws) -> Option<ServerFrame> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.ok()??.ok()?;
        match msg {
            WsMessage::Text(t) => return Some(ServerFrame::parse(&t).unwrap().1),
            WsMessage::Close(_) => return None,
            _ => continue,
        }
    }
}

async fn ws(addr: &str) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn text(ws: &mut Ws, frame: String) {
    ws.send(WsMessage::Text(frame.into())).await.unwrap();
}

#[tokio::test]
async fn admin_routes_need_the_key() {
    let addr = serve().await;
    let client = reqwest::Client::new();
    let url = format!("http://{addr}/sessions");

    let r = client.post(&url).json(&body("s")).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = client.post(&url).bearer_auth("wrong").json(&body("s")).send().await.unwrap();
    assert_eq!(r.status(), 401);

    let r = client.post(&url).bearer_auth(KEY).json(&body("s")).send().await.unwrap();
    assert_eq!(r.status(), 201);
    let created: Created = r.json().await.unwrap();
    assert_eq!(created.tokens.len(), 8);

    let r = client.post(&url).bearer_auth(KEY).json(&body("s")).send().await.unwrap();
    assert_eq!(r.status(), 409);

    let start = format!("http://{addr}/sessions/s/start");
    assert_eq!(client.post(&start).send().await.unwrap().status(), 401);
    assert_eq!(client.post(&start).bearer_auth(KEY).send().await.unwrap().status(), 200);
    let again = client.post(&start).bearer_auth(KEY).send().await.unwrap();
    assert_eq!(again.status(), 409);
    assert_eq!(again.json::<Value>().await.unwrap()["error"], "illegal_transition");

    let missing = client.post(format!("http://{addr}/sessions/zz/start")).bearer_auth(KEY).send().await.unwrap();
    assert_eq!(missing.status(), 404);

    // The snapshot is public.
    let snap: Value = client
        .get(format!("http://{addr}/sessions/s/snapshot"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(snap["state"], "running");
    assert!(snap["net_preference"]["per_option"].is_array());
    assert_eq!(client.get(format!("http://{addr}/sessions/zz/snapshot")).send().await.unwrap().status(), 404);

    let close = client.post(format!("http://{addr}/sessions/s/close")).bearer_auth(KEY).send().await.unwrap();
    assert_eq!(close.status(), 200);
    assert_eq!(close.json::<Value>().await.unwrap()["state"], "closed");

    let bad = client.post(&url).bearer_auth(KEY).json(&json!({"question": "q"})).send().await.unwrap();
    assert!(bad.status().is_client_error());
}

#[tokio::test]
async fn websocket_join_chat_and_errors() {
    let addr = serve().await;
    let client = reqwest::Client::new();
    let created: Created = client
        .post(format!("http://{addr}/sessions"))
        .bearer_auth(KEY)
        .json(&body("w"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();

    // Anything before a join is refused but the socket stays open.
    let mut a = ws(&addr).await;
    text(&mut a, ClientFrame::Send { body: "hi".into() }.to_text("w")).await;
    assert!(matches!(next_frame(&mut a).await, Some(ServerFrame::Error { code: ErrorCode::NotJoined, .. })));
    text(&mut a, r#"{"type":"wave","session_id":"w","body":{}}"#.into()).await;
    assert!(matches!(next_frame(&mut a).await, Some(ServerFrame::Error { code: ErrorCode::UnknownType, .. })));

    // A bad token ends the socket.
    let mut bad = ws(&addr).await;
    text(&mut bad, ClientFrame::Join { token: "nope".into() }.to_text("w")).await;
    assert!(matches!(next_frame(&mut bad).await, Some(ServerFrame::Error { code: ErrorCode::InvalidToken, .. })));
    assert!(next_frame(&mut bad).await.is_none());
    let mut lost = ws(&addr).await;
    text(&mut lost, ClientFrame::Join { token: "nope".into() }.to_text("other")).await;
    assert!(matches!(next_frame(&mut lost).await, Some(ServerFrame::Error { code: ErrorCode::UnknownSession, .. })));

    let (pid, token) = created.tokens.iter().next().unwrap();
    text(&mut a, ClientFrame::Join { token: token.clone() }.to_text("w")).await;
    let Some(ServerFrame::Joined(joined)) = next_frame(&mut a).await else { panic!("no joined frame") };
    assert_eq!(&joined.participant_id, pid);
    assert!(joined.room_members.contains(pid));
    assert_eq!(joined.roster_size, 8);

    client.post(format!("http://{addr}/sessions/w/start")).bearer_auth(KEY).send().await.unwrap();
    assert!(matches!(next_frame(&mut a).await, Some(ServerFrame::State { .. })));

    text(&mut a, ClientFrame::Send { body: "Red all the way".into() }.to_text("w")).await;
    match next_frame(&mut a).await {
        Some(ServerFrame::Message(m)) => {
            assert_eq!(m.body, "Red all the way");
            assert_eq!(&m.author.0, pid);
            assert_eq!(m.room_seq, 1);
        }
        other => panic!("expected echo, got {other:?}"),
    }

    // A second socket with the same token takes over.
    let mut b = ws(&addr).await;
    text(&mut b, ClientFrame::Join { token: token.clone() }.to_text("w")).await;
    assert!(matches!(next_frame(&mut b).await, Some(ServerFrame::Joined(_))));
    assert!(matches!(next_frame(&mut b).await, Some(ServerFrame::Message(m)) if m.room_seq == 1));
    assert!(matches!(next_frame(&mut a).await, Some(ServerFrame::Error { code: ErrorCode::Superseded, .. })));
    assert!(next_frame(&mut a).await.is_none());

    text(&mut b, ClientFrame::Snapshot {}.to_text("w")).await;
    assert!(matches!(next_frame(&mut b).await, Some(ServerFrame::Snapshot(v)) if v["session_id"] == "w"));

    client.post(format!("http://{addr}/sessions/w/close")).bearer_auth(KEY).send().await.unwrap();
    loop {
        match next_frame(&mut b).await {
            Some(ServerFrame::Closed { .. }) => break,
            Some(_) => continue,
            None => panic!("socket ended before the closed frame"),
        }
    }
}
