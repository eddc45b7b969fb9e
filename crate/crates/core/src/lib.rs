//! Conversational swarm deliberation engine.
//!
//! A population is split into small chat rooms joined by a ring of relay
//! agents. Per room, an observer distills dialog into reasons and a
//! surrogate speaks the upstream room's summary; a labeler scores every
//! participant's stance on every option, and the argmax of the mean score
//! is the group's answer.
//!
//! ```
//! use std::sync::Arc;
//! use csi_core::gateway::Gateway;
//! use csi_core::runtime::{Session, SessionConfig};
//! use csi_core::time::{Millis, ParticipantId};
//!
//! let people: Vec<ParticipantId> = (0..10).map(|i| ParticipantId::new(format!("p{i}"))).collect();
//! let config = SessionConfig::new("Lunch?", vec!["Tacos".into(), "Sushi".into()], people, Millis::from_secs(60));
//! let mut session = Session::create(config, Arc::new(Gateway::heuristic())).unwrap();
//! session.start().unwrap();
//! let who = session.room_members(0)[0].clone();
//! session.post_message(&who, "Tacos are great").unwrap();
//! session.advance_clock(Millis::from_secs(60)).unwrap();
//! assert_eq!(session.final_answer(), Some("Tacos"));
//! ```

pub mod agents;
pub mod analytics;
pub mod clock;
pub mod eventlog;
pub mod export;
pub mod fixture;
pub mod gateway;
pub mod message;
pub mod preference;
pub mod replay;
pub mod runtime;
pub mod script;
pub mod stats;
pub mod time;
pub mod topology;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/rooms.md")]
    mod rooms {}
    #[doc = include_str!("../../../book/src/preferences.md")]
    mod preferences {}
    #[doc = include_str!("../../../book/src/analytics.md")]
    mod analytics {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
}
