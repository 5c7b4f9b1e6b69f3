//! Change-propagation latency: time from a client frame arriving at the
//! server to each resulting `change` frame being written to a socket.

use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;

#[derive(Debug, Default)]
pub struct LatencyRecorder {
    micros: Mutex<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank quantile of sorted samples.
pub fn quantile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyRecorder {
    pub fn record(&self, d: Duration) {
        self.micros
            .lock()
            .expect("latency samples poisoned")
            .push(d.as_micros() as u64);
    }

    pub fn clear(&self) {
        self.micros.lock().expect("latency samples poisoned").clear();
    }

    pub fn summary(&self) -> LatencySummary {
        let mut v = self.micros.lock().expect("latency samples poisoned").clone();
        v.sort_unstable();
        let ms = |us: u64| us as f64 / 1000.0;
        LatencySummary {
            count: v.len(),
            p50_ms: ms(quantile(&v, 0.50)),
            p95_ms: ms(quantile(&v, 0.95)),
            p99_ms: ms(quantile(&v, 0.99)),
            max_ms: ms(v.last().copied().unwrap_or(0)),
        }
    }
}
