use std::collections::VecDeque;

use serde::Serialize;

/// Consecutive backend failures after which the backend counts as degraded.
pub const DEGRADED_AFTER: u32 = 5;

const LATENCY_SAMPLES: usize = 256;
const FPS_WINDOW_SECS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub target_fps: f64,
    pub measured_fps: f64,
    pub running: bool,
    pub frames_generated: u64,
    pub skipped_frames: u64,
    pub consecutive_failures: u32,
    pub backend_degraded: bool,
    pub latency_ms_p50: f64,
    pub latency_ms_p90: f64,
    pub latency_ms_p99: f64,
    pub snapshots_written: u64,
    pub subscribers: usize,
}

#[derive(Debug, Clone)]
pub struct Metrics {
    pub target_fps: f64,
    pub running: bool,
    pub frames_generated: u64,
    pub skipped_frames: u64,
    pub consecutive_failures: u32,
    pub snapshots_written: u64,
    frame_times: VecDeque<f64>,
    latencies: VecDeque<f64>,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl Metrics {
    pub fn new(target_fps: f64) -> Self {
        Metrics {
            target_fps,
            running: true,
            frames_generated: 0,
            skipped_frames: 0,
            consecutive_failures: 0,
            snapshots_written: 0,
            frame_times: VecDeque::new(),
            latencies: VecDeque::new(),
        }
    }

    pub fn record_frame(&mut self, t: f64, latency_ms: f64) {
        self.frames_generated += 1;
        self.consecutive_failures = 0;
        self.frame_times.push_back(t);
        while self.frame_times.front().is_some_and(|&f| t - f > FPS_WINDOW_SECS) {
            self.frame_times.pop_front();
        }
        self.latencies.push_back(latency_ms);
        if self.latencies.len() > LATENCY_SAMPLES {
            self.latencies.pop_front();
        }
    }

    /// Returns true when this failure tips the backend into degraded.
    pub fn record_failure(&mut self) -> bool {
        self.skipped_frames += 1;
        self.consecutive_failures += 1;
        self.consecutive_failures == DEGRADED_AFTER
    }

    pub fn degraded(&self) -> bool {
        self.consecutive_failures >= DEGRADED_AFTER
    }

    /// Frames per second across the trailing window.
    pub fn measured_fps(&self) -> f64 {
        match (self.frame_times.front(), self.frame_times.back()) {
            (Some(first), Some(last)) if last > first => (self.frame_times.len() - 1) as f64 / (last - first),
            _ => 0.0,
        }
    }

    pub fn report(&self, subscribers: usize) -> MetricsReport {
        let lat: Vec<f64> = self.latencies.iter().copied().collect();
        MetricsReport {
            target_fps: self.target_fps,
            measured_fps: self.measured_fps(),
            running: self.running,
            frames_generated: self.frames_generated,
            skipped_frames: self.skipped_frames,
            consecutive_failures: self.consecutive_failures,
            backend_degraded: self.degraded(),
            latency_ms_p50: percentile(&lat, 0.5),
            latency_ms_p90: percentile(&lat, 0.9),
            latency_ms_p99: percentile(&lat, 0.99),
            snapshots_written: self.snapshots_written,
            subscribers,
        }
    }
}
