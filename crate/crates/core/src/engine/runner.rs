use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::Engine;

/// How the runner maps ticks to time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Wall clock. Each tick starts one period after the previous one
    /// started, or at once if that moment has already passed.
    RealTime,
    /// As fast as possible; tick `n` sees time `n / fps`. Runs are
    /// repeatable to the bit.
    Virtual,
}

// Upper bound on one sleep so stop requests are seen promptly.
const SLEEP_SLICE: Duration = Duration::from_millis(20);

pub struct RunnerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Engine>>,
}

impl RunnerHandle {
    /// Runs `engine` on its own thread until stopped, or until
    /// `max_frames` frames have been attempted.
    pub fn spawn(mut engine: Engine, pacing: Pacing, max_frames: Option<u64>) -> RunnerHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name("prompttank-engine".into())
            .spawn(move || {
                let origin = Instant::now();
                let mut virtual_t = 0.0;
                while !flag.load(Ordering::Relaxed) {
                    if max_frames.is_some_and(|n| engine.frame_index() >= n) {
                        break;
                    }
                    let period = Duration::from_secs_f64(1.0 / engine.target_fps());
                    match pacing {
                        Pacing::RealTime => {
                            let started = Instant::now();
                            engine.tick(started.duration_since(origin).as_secs_f64());
                            let deadline = started + period;
                            loop {
                                let now = Instant::now();
                                if now >= deadline || flag.load(Ordering::Relaxed) {
                                    break;
                                }
                                thread::sleep((deadline - now).min(SLEEP_SLICE));
                            }
                        }
                        Pacing::Virtual => {
                            engine.tick(virtual_t);
                            virtual_t += period.as_secs_f64();
                        }
                    }
                }
                engine
            })
            .expect("spawning the engine thread");
        RunnerHandle {
            stop,
            thread: Some(thread),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Stops the loop and hands the engine back.
    pub fn stop(mut self) -> Engine {
        self.stop.store(true, Ordering::Relaxed);
        self.join_inner()
    }

    /// Waits for a bounded run to finish.
    pub fn join(mut self) -> Engine {
        self.join_inner()
    }

    fn join_inner(&mut self) -> Engine {
        self.thread
            .take()
            .expect("runner joined twice")
            .join()
            .expect("engine thread panicked")
    }
}

impl Drop for RunnerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
