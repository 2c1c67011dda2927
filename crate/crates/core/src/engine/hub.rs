use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::Duration;

use serde::Serialize;

use super::request::Frame;

#[derive(Debug, Default)]
struct SlotInner {
    frame: Option<Arc<Frame>>,
    dropped: u64,
    delivered: u64,
}

/// A single-frame mailbox. A new frame replaces an untaken one.
#[derive(Debug, Default)]
pub struct FrameSlot {
    inner: Mutex<SlotInner>,
    ready: Condvar,
}

impl FrameSlot {
    fn put(&self, frame: Arc<Frame>) {
        let mut inner = self.inner.lock().unwrap();
        if inner.frame.replace(frame).is_some() {
            inner.dropped += 1;
        }
        self.ready.notify_all();
    }
}

/// One consumer's view of the frame stream.
#[derive(Debug)]
pub struct FrameSubscription {
    slot: Arc<FrameSlot>,
}

impl FrameSubscription {
    pub fn try_take(&self) -> Option<Arc<Frame>> {
        let mut inner = self.slot.inner.lock().unwrap();
        let f = inner.frame.take();
        if f.is_some() {
            inner.delivered += 1;
        }
        f
    }

    pub fn wait_take(&self, timeout: Duration) -> Option<Arc<Frame>> {
        let inner = self.slot.inner.lock().unwrap();
        let (mut inner, _) = self
            .slot
            .ready
            .wait_timeout_while(inner, timeout, |i| i.frame.is_none())
            .unwrap();
        let f = inner.frame.take();
        if f.is_some() {
            inner.delivered += 1;
        }
        f
    }

    /// Frames waiting to be taken; never more than one.
    pub fn pending(&self) -> usize {
        usize::from(self.slot.inner.lock().unwrap().frame.is_some())
    }

    /// Frames replaced before this consumer took them.
    pub fn dropped(&self) -> u64 {
        self.slot.inner.lock().unwrap().dropped
    }

    pub fn delivered(&self) -> u64 {
        self.slot.inner.lock().unwrap().delivered
    }
}

/// Fans frames out to any number of subscribers without ever blocking the
/// publisher.
#[derive(Debug, Default)]
pub struct FrameHub {
    slots: Mutex<Vec<Weak<FrameSlot>>>,
    current: Mutex<Option<Arc<Frame>>>,
}

impl FrameHub {
    pub fn subscribe(&self) -> FrameSubscription {
        let slot = Arc::new(FrameSlot::default());
        self.slots.lock().unwrap().push(Arc::downgrade(&slot));
        FrameSubscription { slot }
    }

    pub fn publish(&self, frame: Arc<Frame>) {
        *self.current.lock().unwrap() = Some(frame.clone());
        let mut slots = self.slots.lock().unwrap();
        slots.retain(|w| match w.upgrade() {
            Some(slot) => {
                slot.put(frame.clone());
                true
            }
            None => false,
        });
    }

    /// Marks that the latest tick produced no frame.
    pub fn clear_current(&self) {
        *self.current.lock().unwrap() = None;
    }

    /// The most recently published frame, if the last tick produced one.
    pub fn current(&self) -> Option<Arc<Frame>> {
        self.current.lock().unwrap().clone()
    }

    pub fn subscriber_count(&self) -> usize {
        self.slots.lock().unwrap().iter().filter(|w| w.strong_count() > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    SkippedFrame { frame_index: u64, reason: String, message: String },
    BackendDegraded { consecutive_failures: u32 },
    BackendRecovered,
    SnapshotWritten { frame_index: u64, path: String },
    SnapshotFailed { message: String },
    Warning { message: String },
}

impl EngineEvent {
    pub fn is_error(&self) -> bool {
        matches!(
            self,
            EngineEvent::SkippedFrame { .. } | EngineEvent::BackendDegraded { .. } | EngineEvent::SnapshotFailed { .. }
        )
    }
}

const EVENT_CAPACITY: usize = 256;

/// Bounded log of engine events; readers keep their own cursor.
#[derive(Debug, Default)]
pub struct EventLog {
    inner: Mutex<(u64, VecDeque<(u64, EngineEvent)>)>,
}

impl EventLog {
    pub fn push(&self, event: EngineEvent) {
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.0;
        inner.0 += 1;
        inner.1.push_back((seq, event));
        if inner.1.len() > EVENT_CAPACITY {
            inner.1.pop_front();
        }
    }

    /// Events at or after `cursor`, and the cursor to use next time.
    pub fn since(&self, cursor: u64) -> (Vec<EngineEvent>, u64) {
        let inner = self.inner.lock().unwrap();
        let events = inner
            .1
            .iter()
            .filter(|(s, _)| *s >= cursor)
            .map(|(_, e)| e.clone())
            .collect();
        (events, inner.0)
    }

    pub fn cursor(&self) -> u64 {
        self.inner.lock().unwrap().0
    }
}
