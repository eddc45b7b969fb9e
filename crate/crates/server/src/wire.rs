//! Wire frames.
//!
//! Every frame is one JSON text message `{"type", "session_id", "body"}`.
//! Field names are documented in the guide's protocol chapter.

use csi_core::message::Message;
use csi_core::runtime::SessionState;
use csi_core::time::Millis;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CLIENT_TYPES: [&str; 3] = ["join", "send", "snapshot"];
pub const SERVER_TYPES: [&str; 7] = ["joined", "message", "agent_message", "state", "snapshot", "error", "closed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireFrame {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub body: Value,
}

impl WireFrame {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }
}

/// Frames a participant sends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum ClientFrame {
    Join { token: String },
    Send { body: String },
    Snapshot {},
}

/// Frames the server sends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum ServerFrame {
    Joined(Joined),
    Message(Message),
    AgentMessage(Message),
    State { state: SessionState, t: Millis },
    Snapshot(Value),
    Error { code: ErrorCode, message: String },
    Closed { final_answer: Option<String>, t: Millis },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joined {
    pub participant_id: String,
    pub room_index: usize,
    /// Human members of the room, including this participant.
    pub room_members: Vec<String>,
    pub roster_size: usize,
    /// Display author of the room's surrogate agent.
    pub agent: String,
    pub state: SessionState,
    pub elapsed: Millis,
    pub duration: Millis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadFrame,
    UnknownType,
    NotJoined,
    AlreadyJoined,
    UnknownSession,
    InvalidToken,
    Superseded,
    EmptyBody,
    BodyTooLong,
    SessionNotRunning,
    Internal,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WireError {
    #[error("not a frame: {0}")]
    BadFrame(String),
    #[error("unknown frame type {0:?}")]
    UnknownType(String),
}

impl WireError {
    pub fn code(&self) -> ErrorCode {
        match self {
            WireError::BadFrame(_) => ErrorCode::BadFrame,
            WireError::UnknownType(_) => ErrorCode::UnknownType,
        }
    }
}

fn typed<T: serde::de::DeserializeOwned>(frame: &WireFrame, known: &[&str]) -> Result<T, WireError> {
    if !known.contains(&frame.kind.as_str()) {
        return Err(WireError::UnknownType(frame.kind.clone()));
    }
    let body = if frame.body.is_null() { Value::Object(Default::default()) } else { frame.body.clone() };
    serde_json::from_value(serde_json::json!({"type": frame.kind, "body": body}))
        .map_err(|e| WireError::BadFrame(e.to_string()))
}

fn envelope(text: &str) -> Result<WireFrame, WireError> {
    serde_json::from_str(text).map_err(|e| WireError::BadFrame(e.to_string()))
}

fn wrap<T: Serialize>(session_id: &str, frame: &T) -> WireFrame {
    let Value::Object(mut map) = serde_json::to_value(frame).expect("frames always serialize") else {
        unreachable!("adjacently tagged enums serialize to objects")
    };
    WireFrame {
        kind: map.remove("type").and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
        session_id: session_id.to_owned(),
        body: map.remove("body").unwrap_or(Value::Object(Default::default())),
    }
}

impl ClientFrame {
    /// Parses a text frame, returning the envelope's session id alongside.
    pub fn parse(text: &str) -> Result<(String, ClientFrame), WireError> {
        let frame = envelope(text)?;
        Ok((frame.session_id.clone(), typed(&frame, &CLIENT_TYPES)?))
    }

    pub fn to_text(&self, session_id: &str) -> String {
        wrap(session_id, self).to_text()
    }
}

impl ServerFrame {
    pub fn parse(text: &str) -> Result<(String, ServerFrame), WireError> {
        let frame = envelope(text)?;
        Ok((frame.session_id.clone(), typed(&frame, &SERVER_TYPES)?))
    }

    pub fn to_wire(&self, session_id: &str) -> WireFrame {
        wrap(session_id, self)
    }

    pub fn to_text(&self, session_id: &str) -> String {
        self.to_wire(session_id).to_text()
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerFrame::Error {
            code,
            message: message.into(),
        }
    }

    /// `message` or `agent_message` depending on the author.
    pub fn chat(message: Message) -> Self {
        if message.is_human() {
            ServerFrame::Message(message)
        } else {
            ServerFrame::AgentMessage(message)
        }
    }
}
