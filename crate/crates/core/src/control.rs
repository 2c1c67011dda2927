//! The client protocol, independent of transport.
//!
//! Text messages are JSON envelopes `{kind, seq, payload}`. Binary messages
//! carry one image each behind a 16-byte header. A [`ControlSession`] holds
//! the per-connection protocol state; the server feeds it incoming text and
//! polls it for outgoing messages.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::engine::{Command, CommandResult, EngineEvent, EngineHandle, Frame, FrameSubscription, Published};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_JPEG_QUALITY: u8 = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Hello,
    StateFull,
    StateDelta,
    Command,
    Frame,
    Metrics,
    Error,
    Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default)]
    pub payload: Value,
}

impl Envelope {
    pub fn new(kind: Kind, seq: Option<u64>, payload: Value) -> Self {
        Envelope { kind, seq, payload }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("envelopes serialise")
    }

    pub fn error(seq: Option<u64>, reason: &str, message: impl Into<String>) -> Self {
        Envelope::new(
            Kind::Error,
            seq,
            json!({ "reason": reason, "message": message.into() }),
        )
    }
}

/// Header in front of every binary frame message: frame index, width,
/// height and payload length, each a big-endian `u32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub frame_index: u32,
    pub width: u32,
    pub height: u32,
    pub payload_len: u32,
}

pub const FRAME_HEADER_LEN: usize = 16;

impl FrameHeader {
    pub fn to_bytes(self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        for (i, v) in [self.frame_index, self.width, self.height, self.payload_len]
            .into_iter()
            .enumerate()
        {
            out[4 * i..4 * i + 4].copy_from_slice(&v.to_be_bytes());
        }
        out
    }

    /// Splits a binary message into header and payload.
    pub fn parse(msg: &[u8]) -> Option<(FrameHeader, &[u8])> {
        if msg.len() < FRAME_HEADER_LEN {
            return None;
        }
        let word = |i: usize| u32::from_be_bytes(msg[4 * i..4 * i + 4].try_into().unwrap());
        let header = FrameHeader {
            frame_index: word(0),
            width: word(1),
            height: word(2),
            payload_len: word(3),
        };
        let payload = &msg[FRAME_HEADER_LEN..];
        (payload.len() == header.payload_len as usize).then_some((header, payload))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Jpeg(u8),
    Png,
}

/// Header plus encoded image. The frame index is truncated to 32 bits.
pub fn encode_frame(frame: &Frame, format: FrameFormat) -> Result<Vec<u8>, crate::pixel::PixelError> {
    let payload = match format {
        FrameFormat::Jpeg(q) => frame.image.encode_jpeg(q)?,
        FrameFormat::Png => frame.image.encode_png()?,
    };
    let header = FrameHeader {
        frame_index: frame.frame_index as u32,
        width: frame.image.width(),
        height: frame.image.height(),
        payload_len: payload.len() as u32,
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// JSON view of the engine state sent to clients. Nodes are keyed by id and
/// carry their effective weight.
pub fn state_view(p: &Published) -> Map<String, Value> {
    let s = &p.state;
    let mut nodes = Map::new();
    for n in &s.nodes {
        let mut v = serde_json::to_value(n).expect("nodes serialise");
        if let Some(w) = p.weights.get(&n.id) {
            v["weight"] = json!(w);
        }
        nodes.insert(n.id.to_string(), v);
    }
    let crossfades: Vec<_> = s.crossfades.values().collect();
    let mut view = Map::new();
    view.insert("protocol_version".into(), json!(PROTOCOL_VERSION));
    view.insert("running".into(), json!(p.running));
    view.insert("target_fps".into(), json!(p.target_fps));
    view.insert("layout".into(), json!(s.layout));
    view.insert("pixel_params".into(), json!(s.pixel));
    view.insert("model_params".into(), json!(s.model));
    view.insert("autopilot".into(), json!(s.autopilot));
    view.insert("lfos".into(), json!(s.lfos));
    view.insert("signal_maps".into(), json!(s.signal_maps));
    view.insert("pluraliser".into(), json!(s.pluraliser));
    view.insert("crossfades".into(), json!(crossfades));
    view.insert("nodes".into(), Value::Object(nodes));
    view
}

/// Changes between two views: top-level keys, with nodes addressed
/// individually as `nodes/<id>`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StateDelta {
    #[serde(default)]
    pub set: BTreeMap<String, Value>,
    #[serde(default)]
    pub remove: Vec<String>,
}

impl StateDelta {
    pub fn is_empty(&self) -> bool {
        self.set.is_empty() && self.remove.is_empty()
    }
}

fn node_map(view: &Map<String, Value>) -> Map<String, Value> {
    match view.get("nodes") {
        Some(Value::Object(m)) => m.clone(),
        _ => Map::new(),
    }
}

pub fn diff_views(old: &Map<String, Value>, new: &Map<String, Value>) -> StateDelta {
    let mut delta = StateDelta::default();
    for (k, v) in new {
        if k != "nodes" && old.get(k) != Some(v) {
            delta.set.insert(k.clone(), v.clone());
        }
    }
    for k in old.keys() {
        if k != "nodes" && !new.contains_key(k) {
            delta.remove.push(k.clone());
        }
    }
    let (on, nn) = (node_map(old), node_map(new));
    for (id, v) in &nn {
        if on.get(id) != Some(v) {
            delta.set.insert(format!("nodes/{id}"), v.clone());
        }
    }
    for id in on.keys() {
        if !nn.contains_key(id) {
            delta.remove.push(format!("nodes/{id}"));
        }
    }
    delta
}

pub fn apply_delta(view: &mut Map<String, Value>, delta: &StateDelta) {
    for key in &delta.remove {
        match key.strip_prefix("nodes/") {
            Some(id) => {
                if let Some(Value::Object(nodes)) = view.get_mut("nodes") {
                    nodes.remove(id);
                }
            }
            None => {
                view.remove(key);
            }
        }
    }
    for (key, v) in &delta.set {
        match key.strip_prefix("nodes/") {
            Some(id) => {
                let nodes = view
                    .entry("nodes")
                    .or_insert_with(|| Value::Object(Map::new()));
                if let Value::Object(nodes) = nodes {
                    nodes.insert(id.to_owned(), v.clone());
                }
            }
            None => {
                view.insert(key.clone(), v.clone());
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Shared secret clients must present in `hello`; `None` admits anyone.
    pub token: Option<String>,
    pub jpeg_quality: u8,
    /// How often to push metrics; `None` only on request.
    pub metrics_interval: Option<Duration>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            token: None,
            jpeg_quality: DEFAULT_JPEG_QUALITY,
            metrics_interval: Some(Duration::from_secs(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outgoing {
    Text(String),
    Binary(Vec<u8>),
}

impl Outgoing {
    fn envelope(e: Envelope) -> Self {
        Outgoing::Text(e.to_text())
    }
}

fn ack_envelope(seq: Option<u64>, op: &str, result: &CommandResult) -> Envelope {
    let payload = match result {
        Ok(outcome) => json!({ "status": "applied", "op": op, "result": outcome.to_json() }),
        Err(e) => json!({ "status": "rejected", "op": op, "reason": e.code, "message": e.message }),
    };
    Envelope::new(Kind::Command, seq, payload)
}

fn rejected(seq: Option<u64>, op: &str, reason: &str, message: impl Into<String>) -> Envelope {
    Envelope::new(
        Kind::Command,
        seq,
        json!({ "status": "rejected", "op": op, "reason": reason, "message": message.into() }),
    )
}

/// Protocol state of one client connection.
pub struct ControlSession {
    handle: EngineHandle,
    config: SessionConfig,
    authed: bool,
    view: Option<Map<String, Value>>,
    delta_seq: u64,
    /// Finished acks keyed by submission slot; released in slot order so a
    /// quick rejection never overtakes an earlier queued command.
    acks: Arc<Mutex<BTreeMap<u64, Envelope>>>,
    next_slot: u64,
    emit_slot: u64,
    frames: Option<FrameSubscription>,
    event_cursor: u64,
    last_metrics: Option<Instant>,
}

impl ControlSession {
    pub fn new(handle: EngineHandle, config: SessionConfig) -> Self {
        let event_cursor = handle.event_cursor();
        ControlSession {
            handle,
            config,
            authed: false,
            view: None,
            delta_seq: 0,
            acks: Arc::new(Mutex::new(BTreeMap::new())),
            next_slot: 0,
            emit_slot: 0,
            frames: None,
            event_cursor,
            last_metrics: None,
        }
    }

    pub fn is_authenticated(&self) -> bool {
        self.authed
    }

    fn state_full(&mut self) -> Envelope {
        let view = state_view(&self.handle.published());
        self.view = Some(view.clone());
        Envelope::new(Kind::StateFull, Some(self.delta_seq), Value::Object(view))
    }

    /// Handles one incoming text message, returning immediate replies.
    pub fn handle_text(&mut self, text: &str) -> Vec<Outgoing> {
        let raw: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return vec![Outgoing::envelope(Envelope::error(None, "malformed_payload", e.to_string()))],
        };
        let seq = raw.get("seq").and_then(Value::as_u64);
        let env: Envelope = match serde_json::from_value(raw.clone()) {
            Ok(e) => e,
            Err(e) => {
                // A command with a broken envelope still gets its single ack.
                if raw.get("kind").and_then(Value::as_str) == Some("command") {
                    let slot = self.next_slot;
                    self.next_slot += 1;
                    let reject = rejected(seq, "", "malformed_payload", e.to_string());
                    return self.release(slot, reject).into_iter().map(Outgoing::envelope).collect();
                }
                return vec![Outgoing::envelope(Envelope::error(seq, "malformed_payload", e.to_string()))];
            }
        };
        match env.kind {
            Kind::Hello => self.hello(env),
            Kind::Command => self.command(env).into_iter().map(Outgoing::envelope).collect(),
            _ if !self.authed => vec![Outgoing::envelope(Envelope::error(
                env.seq,
                "unauthorized",
                "say hello first",
            ))],
            Kind::Signal => {
                let id = env.payload.get("signal_id").and_then(Value::as_str);
                let value = env.payload.get("value").and_then(Value::as_f64);
                match (id, value) {
                    (Some(id), Some(v)) => {
                        self.handle.signal(id, v);
                        Vec::new()
                    }
                    _ => vec![Outgoing::envelope(Envelope::error(
                        env.seq,
                        "malformed_payload",
                        "signal needs signal_id and value",
                    ))],
                }
            }
            Kind::Frame => self.frame_request(env),
            Kind::StateFull => vec![Outgoing::envelope(self.state_full())],
            Kind::Metrics => vec![Outgoing::envelope(self.metrics(env.seq))],
            Kind::StateDelta | Kind::Error => vec![Outgoing::envelope(Envelope::error(
                env.seq,
                "malformed_payload",
                "clients may not send this kind",
            ))],
        }
    }

    fn hello(&mut self, env: Envelope) -> Vec<Outgoing> {
        let token = env.payload.get("token").and_then(Value::as_str);
        if let Some(expected) = &self.config.token {
            if token != Some(expected.as_str()) {
                return vec![Outgoing::envelope(Envelope::error(env.seq, "unauthorized", "bad token"))];
            }
        }
        self.authed = true;
        let stream = env.payload.get("frames").and_then(Value::as_bool).unwrap_or(true);
        if stream && self.frames.is_none() {
            self.frames = Some(self.handle.subscribe());
        }
        let hello = Envelope::new(
            Kind::Hello,
            env.seq,
            json!({ "protocol_version": PROTOCOL_VERSION, "server": "prompttank" }),
        );
        vec![Outgoing::envelope(hello), Outgoing::envelope(self.state_full())]
    }

    /// Queues a command, or rejects it straight away. An immediate rejection
    /// is only returned here when no earlier ack is outstanding; otherwise it
    /// waits its turn in [`ControlSession::pump`].
    fn command(&mut self, env: Envelope) -> Option<Envelope> {
        let slot = self.next_slot;
        self.next_slot += 1;
        let reject = self.submit_command(env, slot)?;
        self.release(slot, reject)
    }

    fn release(&mut self, slot: u64, reject: Envelope) -> Option<Envelope> {
        if self.emit_slot == slot {
            self.emit_slot += 1;
            Some(reject)
        } else {
            self.acks.lock().unwrap().insert(slot, reject);
            None
        }
    }

    fn submit_command(&mut self, env: Envelope, slot: u64) -> Option<Envelope> {
        let op = env.payload.get("op").and_then(Value::as_str).unwrap_or("").to_owned();
        if !self.authed {
            return Some(rejected(env.seq, &op, "unauthorized", "say hello first"));
        }
        if !Command::OPS.contains(&op.as_str()) {
            return Some(rejected(env.seq, &op, "unknown_command", format!("unknown op `{op}`")));
        }
        let command: Command = match serde_json::from_value(env.payload) {
            Ok(c) => c,
            Err(e) => return Some(rejected(env.seq, &op, "malformed_payload", e.to_string())),
        };
        let acks = self.acks.clone();
        let seq = env.seq;
        let queued = self.handle.submit(
            command,
            Some(Box::new(move |result| {
                acks.lock().unwrap().insert(slot, ack_envelope(seq, &op, &result));
            })),
        );
        if !queued {
            return Some(rejected(seq, "", "engine_stopped", "the engine is not running"));
        }
        None
    }

    fn frame_request(&mut self, env: Envelope) -> Vec<Outgoing> {
        if let Some(stream) = env.payload.get("stream").and_then(Value::as_bool) {
            self.frames = stream.then(|| self.handle.subscribe());
            return Vec::new();
        }
        if env.payload.get("meta").and_then(Value::as_bool) == Some(true) {
            let reply = match self.handle.current_frame() {
                Some(f) => Envelope::new(Kind::Frame, env.seq, serde_json::to_value(&*f.meta).expect("meta serialises")),
                None => Envelope::error(env.seq, "no_frame", "no frame is current"),
            };
            return vec![Outgoing::envelope(reply)];
        }
        let Some(wanted) = env.payload.get("frame_index").and_then(Value::as_u64) else {
            return vec![Outgoing::envelope(Envelope::error(
                env.seq,
                "malformed_payload",
                "frame requests need frame_index or stream",
            ))];
        };
        match self.handle.current_frame() {
            Some(f) if f.frame_index == wanted => match encode_frame(&f, FrameFormat::Png) {
                Ok(bytes) => vec![Outgoing::Binary(bytes)],
                Err(e) => vec![Outgoing::envelope(Envelope::error(env.seq, "io_error", e.to_string()))],
            },
            _ => vec![Outgoing::envelope(Envelope::error(
                env.seq,
                "frame_expired",
                format!("frame {wanted} is no longer current"),
            ))],
        }
    }

    fn metrics(&mut self, seq: Option<u64>) -> Envelope {
        self.last_metrics = Some(Instant::now());
        Envelope::new(
            Kind::Metrics,
            seq,
            serde_json::to_value(self.handle.metrics()).expect("metrics serialise"),
        )
    }

    /// Everything that has become ready to send since the last call: state
    /// changes, then acknowledgements, engine errors, metrics and the latest
    /// preview frame.
    pub fn pump(&mut self) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let mut acks = Vec::new();
        {
            let mut ready = self.acks.lock().unwrap();
            while let Some(ack) = ready.remove(&self.emit_slot) {
                acks.push(ack);
                self.emit_slot += 1;
            }
        }
        if self.authed {
            if let Some(old) = &self.view {
                let new = state_view(&self.handle.published());
                let delta = diff_views(old, &new);
                if !delta.is_empty() {
                    self.delta_seq += 1;
                    out.push(Outgoing::envelope(Envelope::new(
                        Kind::StateDelta,
                        Some(self.delta_seq),
                        serde_json::to_value(&delta).expect("deltas serialise"),
                    )));
                    self.view = Some(new);
                }
            }
        }
        out.extend(acks.into_iter().map(Outgoing::envelope));
        if !self.authed {
            return out;
        }

        let (events, cursor) = self.handle.events_since(self.event_cursor);
        self.event_cursor = cursor;
        for e in events {
            if let Some(env) = event_envelope(&e) {
                out.push(Outgoing::envelope(env));
            }
        }
        if let Some(every) = self.config.metrics_interval {
            if self.last_metrics.is_none_or(|t| t.elapsed() >= every) {
                let m = self.metrics(None);
                out.push(Outgoing::envelope(m));
            }
        }
        if let Some(frame) = self.frames.as_ref().and_then(FrameSubscription::try_take) {
            match encode_frame(&frame, FrameFormat::Jpeg(self.config.jpeg_quality)) {
                Ok(bytes) => out.push(Outgoing::Binary(bytes)),
                Err(e) => out.push(Outgoing::envelope(Envelope::error(None, "io_error", e.to_string()))),
            }
        }
        out
    }
}

fn event_envelope(e: &EngineEvent) -> Option<Envelope> {
    let (reason, severity) = match e {
        EngineEvent::SkippedFrame { .. } => ("skipped_frame", "error"),
        EngineEvent::BackendDegraded { .. } => ("backend_degraded", "error"),
        EngineEvent::SnapshotFailed { .. } => ("snapshot_failed", "error"),
        EngineEvent::Warning { .. } => ("warning", "warning"),
        EngineEvent::BackendRecovered | EngineEvent::SnapshotWritten { .. } => return None,
    };
    let mut payload = serde_json::to_value(e).expect("events serialise");
    payload["reason"] = json!(reason);
    payload["severity"] = json!(severity);
    Some(Envelope::new(Kind::Error, None, payload))
}
