//! The complete mutable state of one tank, and the edits performed on it.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::automation::{
    AutomationError, AutopilotConfig, Crossfade, ExternalSignalMap, Lfo, ParamPath, PlaylistAction,
    PluraliserConfig, SignalSample,
};
use crate::pixel::{AdjustmentId, PixelChainParams};
use crate::prompt::{
    join_nodes, step_playlist, weight_for_position, ModelParams, NodeId, NodeKind, PlaylistStep,
    Position, PromptError, PromptNode, TankLayout,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is an adjustment node")]
    KindMismatch(NodeId),
    #[error("node {0} has empty text")]
    EmptyText(NodeId),
    #[error("node {0} has an empty playlist")]
    EmptyPlaylist(NodeId),
    #[error("an adjustment node for {0:?} already exists")]
    DuplicateAdjustment(AdjustmentId),
    #[error("{field}: {reason}")]
    OutOfRange { field: String, reason: String },
    #[error("unknown parameter path `{0}`")]
    InvalidTarget(String),
}

impl StateError {
    /// Stable machine-readable reason for protocol acknowledgements.
    pub fn code(&self) -> &'static str {
        match self {
            StateError::UnknownNode(_) => "unknown_node",
            StateError::KindMismatch(_) => "kind_mismatch",
            StateError::EmptyText(_) => "empty_text",
            StateError::EmptyPlaylist(_) => "empty_playlist",
            StateError::DuplicateAdjustment(_) => "duplicate_adjustment",
            StateError::OutOfRange { .. } => "out_of_range",
            StateError::InvalidTarget(_) => "invalid_target",
        }
    }

    pub fn out_of_range(field: impl Into<String>, reason: impl Into<String>) -> Self {
        StateError::OutOfRange {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<PromptError> for StateError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::KindMismatch(id) => StateError::KindMismatch(id),
            PromptError::EmptyText(id) => StateError::EmptyText(id),
            PromptError::Invalid { id, reason } => {
                StateError::out_of_range(format!("nodes.{id}"), reason)
            }
        }
    }
}

impl From<AutomationError> for StateError {
    fn from(e: AutomationError) -> Self {
        match e {
            AutomationError::UnknownTarget(p) => StateError::InvalidTarget(p),
            AutomationError::Invalid { field, reason } => StateError::out_of_range(field, reason),
        }
    }
}

/// What to create with [`TankState::create_node`].
#[derive(Debug, Clone, PartialEq)]
pub enum NewNode {
    Text(String),
    Automated(String),
    Adjustment(AdjustmentId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TankState {
    /// Kept sorted by id.
    pub nodes: Vec<PromptNode>,
    pub layout: TankLayout,
    pub pixel: PixelChainParams,
    pub model: ModelParams,
    pub autopilot: AutopilotConfig,
    pub lfos: Vec<Lfo>,
    pub signal_maps: Vec<ExternalSignalMap>,
    pub pluraliser: PluraliserConfig,
    pub crossfades: BTreeMap<NodeId, Crossfade>,
    pub next_id: u64,
}

impl Default for TankState {
    fn default() -> Self {
        TankState {
            nodes: Vec::new(),
            layout: TankLayout::default(),
            pixel: PixelChainParams::default(),
            model: ModelParams::default(),
            autopilot: AutopilotConfig::default(),
            lfos: Vec::new(),
            signal_maps: Vec::new(),
            pluraliser: PluraliserConfig::default(),
            crossfades: BTreeMap::new(),
            next_id: 1,
        }
    }
}

/// Storage-zone spot for nodes created without an explicit position.
pub const DEFAULT_NEW_POSITION: Position = Position { x: 0.5, y: 0.8 };

impl TankState {
    pub fn node(&self, id: NodeId) -> Option<&PromptNode> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut PromptNode, StateError> {
        match self.nodes.binary_search_by_key(&id, |n| n.id) {
            Ok(i) => Ok(&mut self.nodes[i]),
            Err(_) => Err(StateError::UnknownNode(id)),
        }
    }

    fn insert_node(&mut self, node: PromptNode) {
        let at = self
            .nodes
            .binary_search_by_key(&node.id, |n| n.id)
            .unwrap_or_else(|i| i);
        self.next_id = self.next_id.max(node.id.0 + 1);
        self.nodes.insert(at, node);
    }

    fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn position_weight(&self, node: &PromptNode) -> f64 {
        weight_for_position(node.position.y, &self.layout)
    }

    pub fn create_node(
        &mut self,
        what: NewNode,
        position: Option<Position>,
        playlist: Vec<String>,
    ) -> Result<NodeId, StateError> {
        let position = position.unwrap_or(DEFAULT_NEW_POSITION);
        let id = NodeId(self.next_id);
        let mut node = match what {
            NewNode::Text(text) | NewNode::Automated(text) if text.is_empty() && playlist.is_empty() => {
                return Err(StateError::EmptyText(id));
            }
            NewNode::Text(text) => PromptNode::text(id, text, position),
            NewNode::Automated(text) => PromptNode::automated(id, text, position),
            NewNode::Adjustment(adj) => {
                if self.nodes.iter().any(|n| n.adjustment_id == Some(adj)) {
                    return Err(StateError::DuplicateAdjustment(adj));
                }
                if !playlist.is_empty() {
                    return Err(StateError::KindMismatch(id));
                }
                PromptNode::adjustment(id, adj, position)
            }
        };
        if playlist.iter().any(String::is_empty) {
            return Err(StateError::EmptyText(id));
        }
        if !playlist.is_empty() {
            if node.text.is_empty() {
                node.text = playlist[0].clone();
            }
            node.playlist = playlist;
        }
        let id = self.fresh_id();
        node.id = id;
        self.insert_node(node);
        Ok(id)
    }

    /// Replaces a node's text, fading over `fade_secs` when positive.
    pub fn edit_text(&mut self, id: NodeId, text: String, t: f64, fade_secs: f64) -> Result<(), StateError> {
        let weight = {
            let node = self.node(id).ok_or(StateError::UnknownNode(id))?;
            if !node.carries_text() {
                return Err(StateError::KindMismatch(id));
            }
            self.position_weight(node)
        };
        if text.is_empty() {
            return Err(StateError::EmptyText(id));
        }
        let old_text = self.current_text(id);
        if fade_secs > 0.0 && !old_text.is_empty() {
            self.start_crossfade(Crossfade::new(id, old_text, text, t, fade_secs, weight)?);
        } else {
            self.crossfades.remove(&id);
            self.node_mut(id)?.text = text;
        }
        Ok(())
    }

    /// The text a node is heading toward: the fade target if one is running.
    fn current_text(&self, id: NodeId) -> String {
        match self.crossfades.get(&id) {
            Some(cf) => cf.new_text.clone(),
            None => self.node(id).map(|n| n.text.clone()).unwrap_or_default(),
        }
    }

    pub fn move_node(&mut self, id: NodeId, x: f64, y: f64) -> Result<(), StateError> {
        if !x.is_finite() || !y.is_finite() {
            return Err(StateError::out_of_range("position", "coordinates must be finite"));
        }
        let position = Position::new(x, y);
        self.node_mut(id)?.position = position;
        let weight = weight_for_position(position.y, &self.layout);
        if let Some(cf) = self.crossfades.get_mut(&id) {
            cf.base_weight = weight;
        }
        Ok(())
    }

    pub fn set_playlist(&mut self, id: NodeId, playlist: Vec<String>) -> Result<(), StateError> {
        let node = self.node_mut(id)?;
        if !node.carries_text() {
            return Err(StateError::KindMismatch(id));
        }
        if playlist.iter().any(String::is_empty) {
            return Err(StateError::EmptyText(id));
        }
        node.playlist = playlist;
        node.playlist_index = 0;
        Ok(())
    }

    pub fn set_pluralise(&mut self, id: NodeId, on: bool) -> Result<(), StateError> {
        let node = self.node_mut(id)?;
        if !node.carries_text() {
            return Err(StateError::KindMismatch(id));
        }
        node.pluralise = on;
        if on {
            node.kind = NodeKind::Automated;
        }
        Ok(())
    }

    /// Joins `a` and `b` into a new node that replaces both.
    pub fn join(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, StateError> {
        if a == b {
            return Err(StateError::out_of_range("b", "cannot join a node with itself"));
        }
        let na = self.node(a).ok_or(StateError::UnknownNode(a))?.clone();
        let nb = self.node(b).ok_or(StateError::UnknownNode(b))?.clone();
        let id = NodeId(self.next_id);
        let joined = join_nodes(&na, &nb, id)?;
        self.fresh_id();
        let enrolled = self.autopilot.enrolled_nodes.contains(&a) || self.autopilot.enrolled_nodes.contains(&b);
        self.delete(a)?;
        self.delete(b)?;
        self.insert_node(joined);
        if enrolled {
            self.autopilot.enrolled_nodes.insert(id);
        }
        Ok(id)
    }

    /// Removes a node along with any automation aimed at it.
    pub fn delete(&mut self, id: NodeId) -> Result<(), StateError> {
        let i = self
            .nodes
            .binary_search_by_key(&id, |n| n.id)
            .map_err(|_| StateError::UnknownNode(id))?;
        self.nodes.remove(i);
        self.crossfades.remove(&id);
        self.autopilot.enrolled_nodes.remove(&id);
        let target = ParamPath::NodeWeight(id);
        self.lfos.retain(|l| l.target != target);
        self.signal_maps.retain(|m| m.target != target);
        Ok(())
    }

    /// Advances a node's playlist, fading if `fade_secs > 0`.
    pub fn next(&mut self, id: NodeId, t: f64, fade_secs: f64) -> Result<(), StateError> {
        let node = self.node(id).ok_or(StateError::UnknownNode(id))?;
        match step_playlist(node, fade_secs) {
            PlaylistStep::Empty => Err(StateError::EmptyPlaylist(id)),
            step => self.apply_playlist_action(PlaylistAction { node_id: id, step }, t),
        }
    }

    pub fn apply_playlist_action(&mut self, action: PlaylistAction, t: f64) -> Result<(), StateError> {
        let fade_secs = self.autopilot.crossfade_time;
        match action.step {
            PlaylistStep::Empty => Ok(()),
            PlaylistStep::Advanced(node) => {
                self.crossfades.remove(&action.node_id);
                *self.node_mut(action.node_id)? = node;
                Ok(())
            }
            PlaylistStep::Fade {
                node,
                old_text,
                new_text,
            } => {
                let weight = self.position_weight(&node);
                let index = node.playlist_index;
                self.node_mut(action.node_id)?.playlist_index = index;
                let old_text = match self.crossfades.get(&action.node_id) {
                    Some(cf) => cf.new_text.clone(),
                    None => old_text,
                };
                self.start_crossfade(Crossfade::new(
                    action.node_id,
                    old_text,
                    new_text,
                    t,
                    fade_secs.max(f64::MIN_POSITIVE),
                    weight,
                )?);
                Ok(())
            }
        }
    }

    /// Starts a fade. A fade already running on the node is finished at once:
    /// the node adopts its target text and the new fade leaves from there.
    pub fn start_crossfade(&mut self, mut cf: Crossfade) {
        if let Some(old) = self.crossfades.remove(&cf.node_id) {
            cf.old_text = old.new_text.clone();
            if let Ok(node) = self.node_mut(cf.node_id) {
                node.text = old.new_text;
            }
        }
        self.crossfades.insert(cf.node_id, cf);
    }

    /// Completes fades that have reached their end; returns the nodes touched.
    pub fn finish_crossfades(&mut self, t: f64) -> Vec<NodeId> {
        let done: Vec<NodeId> = self
            .crossfades
            .values()
            .filter(|cf| cf.is_complete(t))
            .map(|cf| cf.node_id)
            .collect();
        for id in &done {
            if let Some(cf) = self.crossfades.remove(id) {
                if let Ok(node) = self.node_mut(*id) {
                    node.text = cf.new_text;
                }
            }
        }
        done
    }

    pub fn add_lfo(&mut self, lfo: Lfo) -> Result<(), StateError> {
        lfo.validate()?;
        self.check_target(lfo.target)?;
        self.lfos.push(lfo);
        Ok(())
    }

    pub fn remove_lfo(&mut self, index: usize) -> Result<Lfo, StateError> {
        if index >= self.lfos.len() {
            return Err(StateError::out_of_range("index", format!("no LFO at {index}")));
        }
        Ok(self.lfos.remove(index))
    }

    pub fn map_signal(&mut self, map: ExternalSignalMap) -> Result<(), StateError> {
        map.validate()?;
        self.check_target(map.target)?;
        self.signal_maps
            .retain(|m| !(m.signal_id == map.signal_id && m.target == map.target));
        self.signal_maps.push(map);
        Ok(())
    }

    /// Records the latest value of an external signal on every map that
    /// listens to it.
    pub fn record_signal(&mut self, signal_id: &str, value: f64, t: f64) -> Result<(), StateError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(StateError::out_of_range("value", "signals are normalised to [0, 1]"));
        }
        for m in self.signal_maps.iter_mut().filter(|m| m.signal_id == signal_id) {
            m.latest = Some(SignalSample { value, timestamp: t });
        }
        Ok(())
    }

    fn check_target(&self, target: ParamPath) -> Result<(), StateError> {
        if let ParamPath::NodeWeight(id) = target {
            if self.node(id).is_none() {
                return Err(StateError::InvalidTarget(target.to_string()));
            }
        }
        Ok(())
    }

    pub fn set_layout(&mut self, layout: TankLayout) -> Result<(), StateError> {
        layout
            .check()
            .map_err(|reason| StateError::out_of_range("layout", reason))?;
        self.layout = layout;
        Ok(())
    }

    pub fn set_model(&mut self, model: ModelParams) -> Result<(), StateError> {
        if !(0.0..=1.0).contains(&model.strength) {
            return Err(StateError::out_of_range("model_params.strength", "must lie in [0, 1]"));
        }
        self.model = model;
        Ok(())
    }

    pub fn set_pixel(&mut self, pixel: PixelChainParams) -> Result<(), StateError> {
        pixel.validate().map_err(|e| match e {
            crate::pixel::PixelError::Param { field, reason } => {
                StateError::out_of_range(format!("pixel_params.{field}"), reason)
            }
            other => StateError::out_of_range("pixel_params", other.to_string()),
        })?;
        self.pixel = pixel;
        Ok(())
    }

    pub fn set_autopilot(&mut self, cfg: AutopilotConfig) -> Result<(), StateError> {
        cfg.validate()?;
        if let Some(id) = cfg.enrolled_nodes.iter().find(|id| self.node(**id).is_none()) {
            return Err(StateError::UnknownNode(*id));
        }
        self.autopilot = cfg;
        Ok(())
    }

    pub fn set_pluraliser(&mut self, cfg: PluraliserConfig) -> Result<(), StateError> {
        cfg.validate()?;
        self.pluraliser = cfg;
        Ok(())
    }

    /// Checks every invariant, naming the offending field path.
    pub fn validate(&self) -> Result<(), StateError> {
        self.layout
            .check()
            .map_err(|r| StateError::out_of_range("layout", r))?;
        let mut seen_adjustments = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            node.validate().map_err(|e| match e {
                PromptError::Invalid { reason, .. } => StateError::out_of_range(format!("nodes[{i}]"), reason),
                other => other.into(),
            })?;
            if i > 0 && self.nodes[i - 1].id >= node.id {
                return Err(StateError::out_of_range(format!("nodes[{i}].id"), "ids must be unique"));
            }
            if let Some(adj) = node.adjustment_id {
                if seen_adjustments.contains(&adj) {
                    return Err(StateError::DuplicateAdjustment(adj));
                }
                seen_adjustments.push(adj);
            }
        }
        self.pixel.validate().map_err(|e| match e {
            crate::pixel::PixelError::Param { field, reason } => {
                StateError::out_of_range(format!("pixel_params.{field}"), reason)
            }
            other => StateError::out_of_range("pixel_params", other.to_string()),
        })?;
        if !(0.0..=1.0).contains(&self.model.strength) {
            return Err(StateError::out_of_range("model_params.strength", "must lie in [0, 1]"));
        }
        self.autopilot
            .validate()
            .map_err(|e| prefix("autopilot", e.into()))?;
        if let Some(id) = self.autopilot.enrolled_nodes.iter().find(|id| self.node(**id).is_none()) {
            return Err(StateError::out_of_range(
                "autopilot.enrolled_nodes",
                format!("unknown node {id}"),
            ));
        }
        for (i, l) in self.lfos.iter().enumerate() {
            l.validate().map_err(|e| prefix(&format!("lfos[{i}]"), e.into()))?;
            self.check_target(l.target)
                .map_err(|e| prefix(&format!("lfos[{i}]"), e))?;
        }
        for (i, m) in self.signal_maps.iter().enumerate() {
            m.validate()
                .map_err(|e| prefix(&format!("signal_maps[{i}]"), e.into()))?;
            self.check_target(m.target)
                .map_err(|e| prefix(&format!("signal_maps[{i}]"), e))?;
        }
        self.pluraliser
            .validate()
            .map_err(|e| prefix("pluraliser", e.into()))?;
        Ok(())
    }
}

fn prefix(path: &str, e: StateError) -> StateError {
    match e {
        StateError::OutOfRange { field, reason } => StateError::out_of_range(format!("{path}.{field}"), reason),
        StateError::InvalidTarget(t) => StateError::out_of_range(format!("{path}.target"), format!("unknown parameter path `{t}`")),
        other => other,
    }
}
