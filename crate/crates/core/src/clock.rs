//! Session clocks.
//!
//! Live sessions read the wall clock; tests and replay drive a simulated
//! clock explicitly. Both report [`Millis`] since session start.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::time::Millis;

pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

/// Manually advanced clock. Clones share the same underlying time.
#[derive(Clone, Debug, Default)]
pub struct SimClock {
    now_ms: Arc<AtomicU64>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves time forward to `t`. Never moves backwards.
    pub fn set(&self, t: Millis) {
        self.now_ms.fetch_max(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, dt: Millis) {
        self.now_ms.fetch_add(dt.0, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Millis {
        Millis(self.now_ms.load(Ordering::SeqCst))
    }
}

#[derive(Clone, Debug)]
pub struct WallClock {
    started: Instant,
}

impl WallClock {
    pub fn start() -> Self {
        WallClock { started: Instant::now() }
    }
}

impl Clock for WallClock {
    fn now(&self) -> Millis {
        Millis(self.started.elapsed().as_millis() as u64)
    }
}

/// The clock a session runs on.
#[derive(Clone, Debug)]
pub enum SessionClock {
    Simulated(SimClock),
    Wall(WallClock),
}

impl SessionClock {
    pub fn simulated() -> Self {
        SessionClock::Simulated(SimClock::new())
    }

    pub fn wall() -> Self {
        SessionClock::Wall(WallClock::start())
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self, SessionClock::Simulated(_))
    }

    pub fn now(&self) -> Millis {
        match self {
            SessionClock::Simulated(c) => c.now(),
            SessionClock::Wall(c) => c.now(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_is_shared_and_monotone() {
        let clock = SimClock::new();
        let other = clock.clone();
        clock.advance(Millis(1500));
        assert_eq!(other.now(), Millis(1500));
        clock.set(Millis(1000));
        assert_eq!(clock.now(), Millis(1500));
        clock.set(Millis(2000));
        assert_eq!(other.now(), Millis(2000));
    }

    #[test]
    fn wall_clock_moves_forward() {
        let clock = WallClock::start();
        let a = clock.now();
        std::thread::sleep(std::time::Duration::from_millis(5));
        assert!(clock.now() > a);
    }
}
