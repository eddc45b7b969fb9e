//! HTTP admin and snapshot routes plus the websocket chat endpoint.

use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use csi_core::runtime::RuntimeError;
use futures::{SinkExt, StreamExt};
use serde_json::json;

use crate::hub::{CreateSession, Hub, HubError};
use crate::wire::{ClientFrame, ErrorCode, ServerFrame};

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/start", post(start))
        .route("/sessions/{id}/close", post(close))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .route("/ws", get(ws))
        .with_state(hub)
}

impl IntoResponse for HubError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            HubError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            HubError::DuplicateSession(_) => (StatusCode::CONFLICT, "duplicate_session"),
            HubError::InvalidToken => (StatusCode::FORBIDDEN, "invalid_token"),
            HubError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            HubError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            HubError::Runtime(RuntimeError::IllegalTransition { .. }) => (StatusCode::CONFLICT, "illegal_transition"),
            HubError::Runtime(RuntimeError::InvalidConfig(_) | RuntimeError::Topology(_)) => {
                (StatusCode::BAD_REQUEST, "invalid_config")
            }
            HubError::Log(_) | HubError::Runtime(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({"error": code, "message": self.to_string()}))).into_response()
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
}

async fn create(
    State(hub): State<Arc<Hub>>,
    headers: HeaderMap,
    Json(request): Json<CreateSession>,
) -> Result<impl IntoResponse, HubError> {
    hub.authorize(bearer(&headers))?;
    Ok((StatusCode::CREATED, Json(hub.create(request)?)))
}

async fn start(State(hub): State<Arc<Hub>>, headers: HeaderMap, Path(id): Path<String>) -> Result<impl IntoResponse, HubError> {
    hub.authorize(bearer(&headers))?;
    Ok(Json(hub.start(&id)?))
}

async fn close(State(hub): State<Arc<Hub>>, headers: HeaderMap, Path(id): Path<String>) -> Result<impl IntoResponse, HubError> {
    hub.authorize(bearer(&headers))?;
    // Closing runs the last model calls inline.
    let reply = tokio::task::spawn_blocking(move || hub.close(&id))
        .await
        .map_err(|e| HubError::BadRequest(e.to_string()))??;
    Ok(Json(reply))
}

async fn snapshot(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Result<impl IntoResponse, HubError> {
    Ok(Json(hub.snapshot(&id)?))
}

async fn ws(State(hub): State<Arc<Hub>>, upgrade: WebSocketUpgrade) -> Response {
    upgrade.on_upgrade(move |socket| serve_socket(hub, socket))
}

async fn serve_socket(hub: Arc<Hub>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let send = |frame: ServerFrame, session_id: &str| WsMessage::Text(frame.to_text(session_id).into());

    // Nothing but a join is accepted until the participant is attached.
    let (conn, mut rx) = loop {
        let Some(Ok(msg)) = stream.next().await else { return };
        let text = match msg {
            WsMessage::Text(t) => t,
            WsMessage::Close(_) => return,
            _ => continue,
        };
        match ClientFrame::parse(&text) {
            Ok((session_id, ClientFrame::Join { token })) => match hub.connect(&session_id, &token) {
                Ok(pair) => break pair,
                Err(e) => {
                    let code = match e {
                        HubError::UnknownSession(_) => ErrorCode::UnknownSession,
                        HubError::InvalidToken => ErrorCode::InvalidToken,
                        _ => ErrorCode::Internal,
                    };
                    let _ = sink.send(send(ServerFrame::error(code, e.to_string()), &session_id)).await;
                    let _ = sink.send(WsMessage::Close(None)).await;
                    return;
                }
            },
            Ok((session_id, _)) => {
                let frame = ServerFrame::error(ErrorCode::NotJoined, "send a join frame first");
                if sink.send(send(frame, &session_id)).await.is_err() {
                    return;
                }
            }
            Err(e) => {
                if sink.send(send(ServerFrame::error(e.code(), e.to_string()), "")).await.is_err() {
                    return;
                }
            }
        }
    };

    let writer = async {
        while let Some(text) = rx.recv().await {
            if sink.send(WsMessage::Text(text.as_ref().into())).await.is_err() {
                return;
            }
        }
        // Superseded: the hub dropped our sender.
        let _ = sink.send(WsMessage::Close(None)).await;
    };
    let reader = async {
        while let Some(Ok(msg)) = stream.next().await {
            match msg {
                WsMessage::Text(t) => conn.handle_text(&t),
                WsMessage::Close(_) => return,
                _ => {}
            }
        }
    };
    tokio::select! {
        _ = writer => {}
        _ = reader => {}
    }
}
