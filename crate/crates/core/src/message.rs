use serde::{Deserialize, Serialize};

use crate::time::{Millis, ParticipantId};

/// Upper bound on a message body, in characters.
pub const MAX_BODY_CHARS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthorKind {
    Human,
    SurrogateAgent,
}

/// One chat utterance inside a room.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: String,
    pub room_index: usize,
    pub author: ParticipantId,
    pub author_kind: AuthorKind,
    pub body: String,
    pub t: Millis,
    /// Position in the room's stream, gapless from 1.
    pub room_seq: u64,
}

impl Message {
    pub fn is_human(&self) -> bool {
        self.author_kind == AuthorKind::Human
    }

    pub fn id_for(room: usize, room_seq: u64) -> String {
        format!("r{room}-{room_seq}")
    }
}

/// Truncates `text` to at most [`MAX_BODY_CHARS`] characters.
pub(crate) fn clip_body(text: &str) -> String {
    match text.char_indices().nth(MAX_BODY_CHARS) {
        Some((idx, _)) => text[..idx].to_string(),
        None => text.to_string(),
    }
}
