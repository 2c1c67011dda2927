//! The per-frame generation loop.
//!
//! One [`Engine`] owns the tank state. Everything else talks to it through
//! an [`EngineHandle`]: commands go in through a queue that is drained at the
//! start of every tick, and frames, state and metrics come out through
//! shared slots that never block the loop.

pub mod backend;
pub mod command;
pub mod hub;
pub mod metrics;
pub mod remote;
pub mod request;
pub mod runner;
pub mod snapshot;
pub mod source;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::automation::{
    autopilot_tick, count_figures, pluralise_text, resolve_parameters, ExternalSignalMap, Lfo, ParamPath,
    ResolvedParams,
};
use crate::par::Parallelism;
use crate::pixel::{apply_chain_with, PixelParam};
use crate::preset::{load_preset, save_preset, TankPreset};
use crate::prompt::{rank_entries, weight_for_position, NodeId, Position, PromptEntry, TankLayout, WeightedPrompt};
use crate::state::{NewNode, StateError, TankState};

pub use backend::{mock_generate, BackendError, Capabilities, GeneratorBackend, MockBackend};
pub use command::{Command, CommandError, CommandResult, CreateKind, Outcome};
pub use hub::{EngineEvent, FrameSubscription};
pub use metrics::MetricsReport;
pub use remote::RemoteBackend;
pub use request::{Frame, FrameMeta, GenerationRequest, RequestDigest};
pub use runner::{Pacing, RunnerHandle};
pub use source::{FrameSource, SyntheticSource};

use hub::{EventLog, FrameHub};
use metrics::Metrics;
use snapshot::{write_snapshot, SnapshotTimer};

pub const DEFAULT_FPS: f64 = 12.0;
pub const MAX_FPS: f64 = 60.0;
pub const DEFAULT_RESOLUTION: (u32, u32) = (512, 512);

pub fn check_fps(fps: f64) -> Result<(), CommandError> {
    if fps > 0.0 && fps <= MAX_FPS {
        Ok(())
    } else {
        Err(CommandError::new(
            "out_of_range",
            format!("fps must lie in (0, {MAX_FPS}], got {fps}"),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub target_fps: f64,
    pub parallelism: Parallelism,
    pub snapshot_dir: Option<PathBuf>,
    /// Seconds between automatic snapshots; needs `snapshot_dir`.
    pub snapshot_interval: Option<f64>,
    /// Root for preset paths named in commands.
    pub preset_dir: PathBuf,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            target_fps: DEFAULT_FPS,
            parallelism: Parallelism::default(),
            snapshot_dir: None,
            snapshot_interval: None,
            preset_dir: PathBuf::from("."),
        }
    }
}

pub type AckFn = Box<dyn FnOnce(CommandResult) + Send>;

struct Envelope {
    command: Command,
    ack: Option<AckFn>,
}

/// State as of the end of the latest tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Published {
    pub state: TankState,
    /// Effective weight of every text-carrying node.
    pub weights: BTreeMap<NodeId, f64>,
    pub running: bool,
    pub target_fps: f64,
    pub frame_index: u64,
}

struct Shared {
    published: Mutex<Arc<Published>>,
    hub: FrameHub,
    events: EventLog,
    metrics: Mutex<Metrics>,
}

/// Cheap, cloneable access to a running engine.
#[derive(Clone)]
pub struct EngineHandle {
    tx: mpsc::Sender<Envelope>,
    shared: Arc<Shared>,
}

impl EngineHandle {
    /// Queues a command; `ack` runs after the tick that applies it. Returns
    /// false if the engine has gone away.
    pub fn submit(&self, command: Command, ack: Option<AckFn>) -> bool {
        self.tx.send(Envelope { command, ack }).is_ok()
    }

    /// Queues a command and returns a receiver for its acknowledgement.
    pub fn request(&self, command: Command) -> mpsc::Receiver<CommandResult> {
        let (tx, rx) = mpsc::channel();
        self.submit(
            command,
            Some(Box::new(move |r| {
                let _ = tx.send(r);
            })),
        );
        rx
    }

    pub fn signal(&self, signal_id: impl Into<String>, value: f64) -> bool {
        self.submit(
            Command::Signal {
                signal_id: signal_id.into(),
                value,
            },
            None,
        )
    }

    pub fn published(&self) -> Arc<Published> {
        self.shared.published.lock().unwrap().clone()
    }

    pub fn subscribe(&self) -> FrameSubscription {
        self.shared.hub.subscribe()
    }

    pub fn current_frame(&self) -> Option<Arc<Frame>> {
        self.shared.hub.current()
    }

    pub fn metrics(&self) -> MetricsReport {
        let subscribers = self.shared.hub.subscriber_count();
        self.shared.metrics.lock().unwrap().report(subscribers)
    }

    pub fn events_since(&self, cursor: u64) -> (Vec<EngineEvent>, u64) {
        self.shared.events.since(cursor)
    }

    pub fn event_cursor(&self) -> u64 {
        self.shared.events.cursor()
    }
}

pub struct Engine {
    state: TankState,
    config: EngineConfig,
    source: Box<dyn FrameSource>,
    backend: Box<dyn GeneratorBackend>,
    rx: mpsc::Receiver<Envelope>,
    handle: EngineHandle,
    running: bool,
    frame_index: u64,
    autopilot_last: Option<f64>,
    snapshot_timer: Option<SnapshotTimer>,
}

fn frame_period(fps: f64) -> Duration {
    Duration::from_secs_f64(1.0 / fps)
}

impl Engine {
    pub fn new(
        state: TankState,
        config: EngineConfig,
        source: Box<dyn FrameSource>,
        mut backend: Box<dyn GeneratorBackend>,
    ) -> Result<Engine, CommandError> {
        state.validate()?;
        check_fps(config.target_fps)?;
        if let Some(interval) = config.snapshot_interval {
            if !(interval > 0.0 && interval.is_finite()) {
                return Err(CommandError::new("out_of_range", "snapshot interval must be positive"));
            }
            if config.snapshot_dir.is_none() {
                return Err(CommandError::new("invalid_path", "automatic snapshots need a snapshot directory"));
            }
        }
        backend.set_frame_period(frame_period(config.target_fps));
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            published: Mutex::new(Arc::new(Published {
                state: state.clone(),
                weights: BTreeMap::new(),
                running: true,
                target_fps: config.target_fps,
                frame_index: 0,
            })),
            hub: FrameHub::default(),
            events: EventLog::default(),
            metrics: Mutex::new(Metrics::new(config.target_fps)),
        });
        let engine = Engine {
            snapshot_timer: config.snapshot_interval.map(SnapshotTimer::new),
            state,
            config,
            source,
            backend,
            rx,
            handle: EngineHandle { tx, shared },
            running: true,
            frame_index: 0,
            autopilot_last: None,
        };
        for message in engine.state.autopilot.diagnostics() {
            engine.handle.shared.events.push(EngineEvent::Warning { message });
        }
        let resolved = resolve_parameters(&engine.state, 0.0);
        engine.publish(&resolved);
        Ok(engine)
    }

    pub fn handle(&self) -> EngineHandle {
        self.handle.clone()
    }

    pub fn state(&self) -> &TankState {
        &self.state
    }

    pub fn running(&self) -> bool {
        self.running
    }

    pub fn target_fps(&self) -> f64 {
        self.config.target_fps
    }

    /// Frames attempted so far, including skipped ones.
    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    /// One pass of the loop at time `t` (seconds). Returns the frame, or
    /// `None` when stopped or the frame was skipped.
    pub fn tick(&mut self, t: f64) -> Option<Arc<Frame>> {
        let mut acks = Vec::new();
        while let Ok(env) = self.rx.try_recv() {
            let result = self.apply(env.command, t);
            if let Some(ack) = env.ack {
                acks.push((ack, result));
            }
        }
        self.state.finish_crossfades(t);
        if self.running {
            let last = self.autopilot_last.get_or_insert(t);
            for action in autopilot_tick(&self.state.autopilot, t, last, &self.state.nodes) {
                let _ = self.state.apply_playlist_action(action, t);
            }
        }
        let resolved = resolve_parameters(&self.state, t);
        let frame = if self.running {
            self.generate(t, &resolved)
        } else {
            None
        };
        self.publish(&resolved);
        for (ack, result) in acks {
            ack(result);
        }
        frame
    }

    fn publish(&self, resolved: &ResolvedParams) {
        let weights = self
            .state
            .nodes
            .iter()
            .filter(|n| n.carries_text())
            .map(|n| {
                let w = resolved
                    .weight_overrides
                    .get(&n.id)
                    .copied()
                    .unwrap_or_else(|| weight_for_position(n.position.y, &self.state.layout));
                (n.id, w)
            })
            .collect();
        let published = Published {
            state: self.state.clone(),
            weights,
            running: self.running,
            target_fps: self.config.target_fps,
            frame_index: self.frame_index,
        };
        *self.handle.shared.published.lock().unwrap() = Arc::new(published);
    }

    fn event(&self, e: EngineEvent) {
        self.handle.shared.events.push(e);
    }

    fn skip(&self, frame_index: u64, reason: &str, message: String) {
        self.handle.shared.hub.clear_current();
        tracing::warn!(frame_index, reason, "frame skipped: {message}");
        self.event(EngineEvent::SkippedFrame {
            frame_index,
            reason: reason.to_owned(),
            message,
        });
    }

    /// The prompt list for this frame, with pluralised texts and both sides
    /// of every running crossfade.
    fn compose(&self, resolved: &ResolvedParams, processed: &crate::pixel::Image) -> Vec<WeightedPrompt> {
        let cfg = &self.state.pluraliser;
        let count = (cfg.enabled && self.state.nodes.iter().any(|n| n.pluralise && n.carries_text()))
            .then(|| count_figures(processed, cfg));
        let fading: BTreeSet<NodeId> = resolved.crossfades.iter().map(|c| c.node_id).collect();
        let text_of = |id: NodeId, text: &str| match (count, self.state.node(id)) {
            (Some(c), Some(n)) if n.pluralise => pluralise_text(text, c, cfg),
            _ => text.to_owned(),
        };

        let mut entries = Vec::new();
        for n in &self.state.nodes {
            if !n.carries_text() || n.text.is_empty() || fading.contains(&n.id) {
                continue;
            }
            let weight = resolved
                .weight_overrides
                .get(&n.id)
                .copied()
                .unwrap_or_else(|| weight_for_position(n.position.y, &self.state.layout));
            entries.push(PromptEntry {
                node: n.id,
                prompt: WeightedPrompt::new(text_of(n.id, &n.text), weight),
            });
        }
        for cf in &resolved.crossfades {
            for (text, weight) in [(&cf.old_text, cf.old_weight), (&cf.new_text, cf.new_weight)] {
                entries.push(PromptEntry {
                    node: cf.node_id,
                    prompt: WeightedPrompt::new(text_of(cf.node_id, text), weight),
                });
            }
        }
        rank_entries(entries)
    }

    fn generate(&mut self, t: f64, resolved: &ResolvedParams) -> Option<Arc<Frame>> {
        let index = self.frame_index;
        self.frame_index += 1;
        let input = match self.source.next_frame() {
            Ok(img) => img,
            Err(e) => {
                self.skip(index, "source", e.to_string());
                return None;
            }
        };
        let processed = match apply_chain_with(&input, &resolved.pixel, self.config.parallelism) {
            Ok(img) => img,
            Err(e) => {
                self.skip(index, "pixel_chain", e.to_string());
                return None;
            }
        };
        let prompts = self.compose(resolved, &processed);
        let req = GenerationRequest {
            image: processed,
            prompts,
            strength: resolved.model.strength,
            seed: resolved.model.seed,
            frame_index: index,
            timestamp: t,
        };
        let digest = req.digest();
        let started = Instant::now();
        let result = self.backend.generate(&req);
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;

        let image = match result {
            Ok(img) => img,
            Err(e) => {
                self.skip(index, e.code(), e.to_string());
                let mut m = self.handle.shared.metrics.lock().unwrap();
                if m.record_failure() {
                    let consecutive_failures = m.consecutive_failures;
                    drop(m);
                    self.event(EngineEvent::BackendDegraded { consecutive_failures });
                }
                return None;
            }
        };
        {
            let mut m = self.handle.shared.metrics.lock().unwrap();
            let was_degraded = m.degraded();
            m.record_frame(t, latency_ms);
            drop(m);
            if was_degraded {
                self.event(EngineEvent::BackendRecovered);
            }
        }

        let meta = FrameMeta {
            timestamp: t,
            frame_index: index,
            request_digest: digest,
            params: resolved.to_map(&self.state),
            prompt_string: req.prompt_string(),
            prompts: req.prompts,
            seed: req.seed,
            strength: req.strength,
            width: image.width(),
            height: image.height(),
        };
        let frame = Arc::new(Frame {
            image,
            request_digest: digest,
            frame_index: index,
            latency_ms,
            meta: Arc::new(meta),
        });
        self.handle.shared.hub.publish(frame.clone());

        if self.snapshot_timer.as_mut().is_some_and(|timer| timer.due(t)) {
            let _ = self.snapshot(&frame);
        }
        Some(frame)
    }

    fn snapshot(&self, frame: &Frame) -> Result<PathBuf, CommandError> {
        let dir = self
            .config
            .snapshot_dir
            .as_ref()
            .ok_or_else(|| CommandError::new("invalid_path", "no snapshot directory configured"))?;
        match write_snapshot(frame, dir) {
            Ok(path) => {
                self.handle.shared.metrics.lock().unwrap().snapshots_written += 1;
                self.event(EngineEvent::SnapshotWritten {
                    frame_index: frame.frame_index,
                    path: path.display().to_string(),
                });
                Ok(path)
            }
            Err(e) => {
                self.event(EngineEvent::SnapshotFailed { message: e.to_string() });
                Err(CommandError::new("io_error", e.to_string()))
            }
        }
    }

    fn set_rate(&mut self, fps: f64) -> Result<(), CommandError> {
        check_fps(fps)?;
        self.config.target_fps = fps;
        self.backend.set_frame_period(frame_period(fps));
        self.handle.shared.metrics.lock().unwrap().target_fps = fps;
        Ok(())
    }

    fn set_running(&mut self, running: bool) {
        self.running = running;
        self.handle.shared.metrics.lock().unwrap().running = running;
    }

    fn apply(&mut self, command: Command, t: f64) -> CommandResult {
        let fade = self.state.autopilot.crossfade_time;
        let s = &mut self.state;
        match command {
            Command::CreateNode {
                text,
                kind,
                adjustment,
                x,
                y,
                playlist,
            } => {
                let what = match kind {
                    CreateKind::Text => NewNode::Text(text),
                    CreateKind::Automated => NewNode::Automated(text),
                    CreateKind::Adjustment => NewNode::Adjustment(adjustment.ok_or_else(|| {
                        StateError::out_of_range("adjustment", "adjustment nodes need an adjustment id")
                    })?),
                };
                let position = match (x, y) {
                    (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Some(Position::new(x, y)),
                    (None, None) => None,
                    _ => return Err(StateError::out_of_range("position", "give both x and y as finite numbers").into()),
                };
                Ok(Outcome::NodeCreated(s.create_node(what, position, playlist)?))
            }
            Command::EditNodeText { node_id, text } => {
                s.edit_text(node_id, text, t, fade)?;
                Ok(Outcome::Done)
            }
            Command::MoveNode { node_id, x, y } => {
                s.move_node(node_id, x, y)?;
                Ok(Outcome::Done)
            }
            Command::JoinNodes { a, b } => Ok(Outcome::NodeCreated(s.join(a, b)?)),
            Command::DeleteNode { node_id } => {
                s.delete(node_id)?;
                Ok(Outcome::Done)
            }
            Command::SetPlaylist { node_id, playlist } => {
                s.set_playlist(node_id, playlist)?;
                Ok(Outcome::Done)
            }
            Command::SetPluralise { node_id, enabled } => {
                s.set_pluralise(node_id, enabled)?;
                Ok(Outcome::Done)
            }
            Command::SetPixelParam { param, value } => {
                let p: PixelParam = param
                    .parse()
                    .map_err(|m: String| CommandError::new("invalid_target", m))?;
                let mut pixel = s.pixel;
                p.set(&mut pixel, value);
                s.set_pixel(pixel)?;
                Ok(Outcome::Done)
            }
            Command::SetModelParams { strength, seed } => {
                let mut model = s.model;
                if let Some(v) = strength {
                    model.strength = v;
                }
                if let Some(v) = seed {
                    model.seed = v;
                }
                s.set_model(model)?;
                Ok(Outcome::Done)
            }
            Command::SetLayout {
                active_fraction,
                max_weight,
            } => {
                s.set_layout(TankLayout {
                    active_fraction: active_fraction.unwrap_or(s.layout.active_fraction),
                    max_weight: max_weight.unwrap_or(s.layout.max_weight),
                })?;
                Ok(Outcome::Done)
            }
            Command::SetAutopilot {
                enabled,
                period,
                crossfade_time,
                enrolled_nodes,
            } => {
                let mut cfg = s.autopilot.clone();
                let was_enabled = cfg.enabled;
                if let Some(v) = enabled {
                    cfg.enabled = v;
                }
                if let Some(v) = period {
                    cfg.period = v;
                }
                if let Some(v) = crossfade_time {
                    cfg.crossfade_time = v;
                }
                if let Some(v) = enrolled_nodes {
                    cfg.enrolled_nodes = v.into_iter().collect();
                }
                let warnings = cfg.diagnostics();
                s.set_autopilot(cfg)?;
                if !was_enabled && s.autopilot.enabled {
                    self.autopilot_last = Some(t);
                }
                for message in warnings {
                    self.event(EngineEvent::Warning { message });
                }
                Ok(Outcome::Done)
            }
            Command::SetPluraliser {
                enabled,
                threshold,
                min_area_fraction,
                max_count_worded,
            } => {
                let mut cfg = s.pluraliser;
                if let Some(v) = enabled {
                    cfg.enabled = v;
                }
                if let Some(v) = threshold {
                    cfg.threshold = v;
                }
                if let Some(v) = min_area_fraction {
                    cfg.min_area_fraction = v;
                }
                if let Some(v) = max_count_worded {
                    cfg.max_count_worded = v;
                }
                s.set_pluraliser(cfg)?;
                Ok(Outcome::Done)
            }
            Command::Next { node_id } => {
                s.next(node_id, t, fade)?;
                Ok(Outcome::Done)
            }
            Command::AddLfo {
                target,
                frequency,
                depth,
                base,
                phase,
            } => {
                let target = ParamPath::bind(&target, &s.nodes).map_err(StateError::from)?;
                s.add_lfo(Lfo {
                    target,
                    frequency,
                    depth,
                    base,
                    phase,
                })?;
                Ok(Outcome::Done)
            }
            Command::RemoveLfo { index } => {
                s.remove_lfo(index)?;
                Ok(Outcome::Done)
            }
            Command::MapSignal {
                signal_id,
                target,
                gain,
                offset,
                stale_after,
            } => {
                let target = ParamPath::bind(&target, &s.nodes).map_err(StateError::from)?;
                let mut map = ExternalSignalMap::new(signal_id, target, gain, offset);
                if let Some(v) = stale_after {
                    map.stale_after = v;
                }
                s.map_signal(map)?;
                Ok(Outcome::Done)
            }
            Command::Signal { signal_id, value } => {
                s.record_signal(&signal_id, value, t)?;
                Ok(Outcome::Done)
            }
            Command::LoadPreset { path } => {
                let path = command::resolve_within(&self.config.preset_dir, &path)?;
                let state = load_preset(&path)?.to_state()?;
                self.state = state;
                self.autopilot_last = Some(t);
                for message in self.state.autopilot.diagnostics() {
                    self.event(EngineEvent::Warning { message });
                }
                Ok(Outcome::Done)
            }
            Command::SavePreset { path, name } => {
                let path = command::resolve_within(&self.config.preset_dir, &path)?;
                save_preset(&TankPreset::from_state(s, name), &path)?;
                Ok(Outcome::Saved(path))
            }
            Command::Snapshot => {
                let frame = self
                    .handle
                    .shared
                    .hub
                    .current()
                    .ok_or_else(|| CommandError::new("no_frame", "the latest frame was skipped"))?;
                let path = self.snapshot(&frame)?;
                Ok(Outcome::Snapshot {
                    frame_index: frame.frame_index,
                    path,
                })
            }
            Command::SetRate { fps } => {
                self.set_rate(fps)?;
                Ok(Outcome::Done)
            }
            Command::Start => {
                self.set_running(true);
                Ok(Outcome::Done)
            }
            Command::Stop => {
                self.set_running(false);
                Ok(Outcome::Done)
            }
        }
    }
}
