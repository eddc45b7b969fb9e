//! Network surface for conversational swarm sessions: websocket chat,
//! admin and snapshot endpoints, and the synthetic swarm harness.

pub mod http;
pub mod hub;
pub mod wire;
pub mod swarm;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
