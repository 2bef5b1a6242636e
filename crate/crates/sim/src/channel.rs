//! Lossy, delayed, order-preserving link between the two stations.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// Tolerance on release times so that a latency that is an exact multiple
/// of the tick is not lost to round-off.
const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// One-way latency (ms).
    pub delay_ms: f64,
    /// Extra uniform latency in `[0, jitter_ms]` (ms).
    pub jitter_ms: f64,
    pub drop_rate: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn validate(&self) -> SimResult<()> {
        if !(self.delay_ms >= 0.0 && self.delay_ms.is_finite()) {
            return Err(SimError::config("channel.delay_ms must be >= 0"));
        }
        if !(self.jitter_ms >= 0.0 && self.jitter_ms.is_finite()) {
            return Err(SimError::config("channel.jitter_ms must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(SimError::config("channel.drop_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct InFlight<T> {
    release: f64,
    sent: f64,
    msg: T,
}

#[derive(Clone, Debug)]
pub struct DelayChannel<T> {
    latency: f64,
    jitter: f64,
    drop_rate: f64,
    rng: ChaCha8Rng,
    queue: VecDeque<InFlight<T>>,
    last_release: f64,
    last_send: f64,
    sent: u64,
    dropped: u64,
}

impl<T> DelayChannel<T> {
    /// `stream` separates the random sequences of channels sharing a seed.
    pub fn new(cfg: &ChannelConfig, stream: u64) -> SimResult<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        Ok(Self {
            latency: cfg.delay_ms * 1e-3,
            jitter: cfg.jitter_ms * 1e-3,
            drop_rate: cfg.drop_rate,
            rng,
            queue: VecDeque::new(),
            last_release: f64::NEG_INFINITY,
            last_send: f64::NEG_INFINITY,
            sent: 0,
            dropped: 0,
        })
    }

    /// Queues `msg` at time `now`. A message that would overtake an earlier
    /// one is held back until the earlier one is released.
    pub fn send(&mut self, msg: T, now: f64) {
        debug_assert!(now >= self.last_send, "channel time went backwards");
        self.last_send = now;
        self.sent += 1;
        if self.drop_rate > 0.0 && self.rng.gen::<f64>() < self.drop_rate {
            self.dropped += 1;
            return;
        }
        let extra = if self.jitter > 0.0 {
            self.rng.gen::<f64>() * self.jitter
        } else {
            0.0
        };
        let release = (now + self.latency + extra).max(self.last_release);
        self.last_release = release;
        self.queue.push_back(InFlight {
            release,
            sent: now,
            msg,
        });
    }

    /// Releases every message due at `now`, oldest first, with its send time.
    pub fn poll_timed(&mut self, now: f64) -> Vec<(f64, T)> {
        let mut out = Vec::new();
        while self
            .queue
            .front()
            .is_some_and(|m| m.release <= now + TIME_EPS)
        {
            let m = self.queue.pop_front().expect("front checked");
            out.push((m.sent, m.msg));
        }
        out
    }

    pub fn poll(&mut self, now: f64) -> Vec<T> {
        self.poll_timed(now).into_iter().map(|(_, m)| m).collect()
    }

    /// Messages in flight.
    pub fn depth(&self) -> usize {
        self.queue.len()
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
