use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Default)]
pub(crate) struct StreamCounters {
    pub logical: AtomicU64,
    pub transport: AtomicU64,
    pub bytes: AtomicU64,
    pub delivered: AtomicU64,
}

impl StreamCounters {
    pub fn load(&self) -> [u64; 4] {
        [
            self.logical.load(Ordering::SeqCst),
            self.transport.load(Ordering::SeqCst),
            self.bytes.load(Ordering::SeqCst),
            self.delivered.load(Ordering::SeqCst),
        ]
    }
}

/// Traffic on one labeled stream.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamTraffic {
    pub name: String,
    /// Envelopes handed to `send`.
    pub logical: u64,
    /// Batches dispatched after aggregation.
    pub transport: u64,
    /// Payload bytes sent.
    pub bytes: u64,
    /// Envelopes whose handler has returned.
    pub delivered: u64,
}

/// Point-in-time copy of every stream's counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub streams: Vec<StreamTraffic>,
}

impl TrafficCounters {
    pub fn stream(&self, name: &str) -> Option<&StreamTraffic> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn logical(&self) -> u64 {
        self.streams.iter().map(|s| s.logical).sum()
    }

    pub fn transport(&self) -> u64 {
        self.streams.iter().map(|s| s.transport).sum()
    }

    pub fn bytes(&self) -> u64 {
        self.streams.iter().map(|s| s.bytes).sum()
    }

    pub fn delivered(&self) -> u64 {
        self.streams.iter().map(|s| s.delivered).sum()
    }

    /// Counter growth since `before`; streams are matched by position.
    pub fn since(&self, before: &TrafficCounters) -> TrafficCounters {
        TrafficCounters {
            streams: self
                .streams
                .iter()
                .zip(&before.streams)
                .map(|(a, b)| StreamTraffic {
                    name: a.name.clone(),
                    logical: a.logical - b.logical,
                    transport: a.transport - b.transport,
                    bytes: a.bytes - b.bytes,
                    delivered: a.delivered - b.delivered,
                })
                .collect(),
        }
    }

    pub(crate) fn add_raw(&mut self, idx: usize, raw: [u64; 4]) {
        let s = &mut self.streams[idx];
        s.logical += raw[0];
        s.transport += raw[1];
        s.bytes += raw[2];
        s.delivered += raw[3];
    }
}
