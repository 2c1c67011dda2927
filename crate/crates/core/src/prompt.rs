//! Prompt nodes, tank geometry and the weighted prompt set.
//!
//! A node's weight comes from its height on the canvas: the upper
//! `active_fraction` of the canvas is the active zone, weighted linearly from
//! `max_weight` at the top edge down to zero at the zone boundary. Everything
//! below the boundary is storage and carries no weight. The horizontal
//! coordinate is free for the performer to organise nodes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pixel::AdjustmentId;

/// Separator used when two prompt texts are joined into one node.
pub const JOIN_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Text,
    Adjustment,
    Automated,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("node {0} is an adjustment node and cannot be joined")]
    KindMismatch(NodeId),
    #[error("node {0} has empty text")]
    EmptyText(NodeId),
    #[error("node {id}: {reason}")]
    Invalid { id: NodeId, reason: String },
}

/// Normalised canvas coordinates, `y = 0` at the top edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    /// Clamps both components into `[0, 1]`; non-finite input maps to 0.
    pub fn new(x: f64, y: f64) -> Self {
        Position {
            x: clamp_unit(x),
            y: clamp_unit(y),
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// A movable prompt object whose canvas height sets its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptNode {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default)]
    pub text: String,
    pub position: Position,
    #[serde(default)]
    pub playlist: Vec<String>,
    #[serde(default)]
    pub playlist_index: usize,
    #[serde(default)]
    pub pluralise: bool,
    #[serde(default)]
    pub adjustment_id: Option<AdjustmentId>,
    #[serde(default)]
    pub joined_from: Vec<String>,
}

impl PromptNode {
    pub fn text(id: NodeId, text: impl Into<String>, position: Position) -> Self {
        PromptNode {
            id,
            kind: NodeKind::Text,
            text: text.into(),
            position,
            playlist: Vec::new(),
            playlist_index: 0,
            pluralise: false,
            adjustment_id: None,
            joined_from: Vec::new(),
        }
    }

    pub fn adjustment(id: NodeId, adjustment: AdjustmentId, position: Position) -> Self {
        PromptNode {
            kind: NodeKind::Adjustment,
            adjustment_id: Some(adjustment),
            ..PromptNode::text(id, "", position)
        }
    }

    pub fn automated(id: NodeId, text: impl Into<String>, position: Position) -> Self {
        PromptNode {
            kind: NodeKind::Automated,
            ..PromptNode::text(id, text, position)
        }
    }

    pub fn with_playlist(mut self, playlist: Vec<String>) -> Self {
        self.playlist = playlist;
        self.playlist_index = 0;
        self
    }

    /// Whether this node contributes text to the prompt set.
    pub fn carries_text(&self) -> bool {
        matches!(self.kind, NodeKind::Text | NodeKind::Automated)
    }

    /// Checks the node invariants, reporting the first violated one.
    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| PromptError::Invalid {
            id: self.id,
            reason: reason.to_owned(),
        };
        if !self.position.is_valid() {
            return Err(invalid("position outside [0,1]"));
        }
        match self.kind {
            NodeKind::Adjustment => {
                if !self.text.is_empty() {
                    return Err(invalid("adjustment node must have empty text"));
                }
                if self.adjustment_id.is_none() {
                    return Err(invalid("adjustment node needs an adjustment_id"));
                }
            }
            NodeKind::Text | NodeKind::Automated => {
                if self.adjustment_id.is_some() {
                    return Err(invalid("only adjustment nodes carry an adjustment_id"));
                }
                if self.text.is_empty() {
                    return Err(invalid("text must not be empty"));
                }
                if self.playlist.iter().any(String::is_empty) {
                    return Err(invalid("playlist entries must not be empty"));
                }
            }
        }
        if self.playlist_index >= self.playlist.len().max(1) {
            return Err(invalid("playlist_index out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankLayout {
    pub active_fraction: f64,
    pub max_weight: f64,
}

impl Default for TankLayout {
    fn default() -> Self {
        TankLayout {
            active_fraction: 1.0 / 3.0,
            max_weight: 1.0,
        }
    }
}

impl TankLayout {
    pub fn new(active_fraction: f64, max_weight: f64) -> Result<Self, String> {
        let layout = TankLayout {
            active_fraction,
            max_weight,
        };
        layout.check().map(|_| layout)
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.active_fraction > 0.0 && self.active_fraction < 1.0) {
            return Err("active_fraction must lie strictly between 0 and 1".into());
        }
        if !(self.max_weight > 0.0 && self.max_weight.is_finite()) {
            return Err("max_weight must be positive".into());
        }
        Ok(())
    }
}

/// Weight for a node at vertical position `y`.
pub fn weight_for_position(y: f64, layout: &TankLayout) -> f64 {
    let y = clamp_unit(y);
    if y < layout.active_fraction {
        layout.max_weight * (layout.active_fraction - y) / layout.active_fraction
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPrompt {
    pub text: String,
    pub weight: f64,
}

impl WeightedPrompt {
    pub fn new(text: impl Into<String>, weight: f64) -> Self {
        WeightedPrompt {
            text: text.into(),
            weight,
        }
    }
}

/// A prompt tagged with the node that produced it, prior to ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub node: NodeId,
    pub prompt: WeightedPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub strength: f64,
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            strength: 0.5,
            seed: 0,
        }
    }
}

/// Per-node weights before ranking. Overrides replace the position weight.
pub fn prompt_entries(
    nodes: &[PromptNode],
    layout: &TankLayout,
    overrides: &BTreeMap<NodeId, f64>,
) -> Vec<PromptEntry> {
    nodes
        .iter()
        .filter(|n| n.carries_text() && !n.text.is_empty())
        .map(|n| PromptEntry {
            node: n.id,
            prompt: WeightedPrompt::new(
                n.text.clone(),
                overrides
                    .get(&n.id)
                    .copied()
                    .unwrap_or_else(|| weight_for_position(n.position.y, layout)),
            ),
        })
        .collect()
}

/// Drops zero-weight entries and orders by weight descending, then node id,
/// then text.
pub fn rank_entries(mut entries: Vec<PromptEntry>) -> Vec<WeightedPrompt> {
    entries.retain(|e| e.prompt.weight > 0.0 && !e.prompt.text.is_empty());
    entries.sort_by(|a, b| {
        b.prompt
            .weight
            .total_cmp(&a.prompt.weight)
            .then(a.node.cmp(&b.node))
            .then_with(|| a.prompt.text.cmp(&b.prompt.text))
    });
    entries.into_iter().map(|e| e.prompt).collect()
}

/// The weighted prompt set handed to generators. Weights are not normalised.
pub fn compose_prompt_set(
    nodes: &[PromptNode],
    layout: &TankLayout,
    overrides: &BTreeMap<NodeId, f64>,
) -> Vec<WeightedPrompt> {
    rank_entries(prompt_entries(nodes, layout, overrides))
}

/// Joins two text-carrying nodes. The result takes `a`'s position and the
/// caller's fresh id; removing the originals is the caller's job.
pub fn join_nodes(a: &PromptNode, b: &PromptNode, id: NodeId) -> Result<PromptNode, PromptError> {
    for n in [a, b] {
        if !n.carries_text() {
            return Err(PromptError::KindMismatch(n.id));
        }
        if n.text.is_empty() {
            return Err(PromptError::EmptyText(n.id));
        }
    }
    let constituents = |n: &PromptNode| {
        if n.joined_from.is_empty() {
            vec![n.text.clone()]
        } else {
            n.joined_from.clone()
        }
    };
    let mut joined_from = constituents(a);
    joined_from.extend(constituents(b));
    let kind = if a.kind == NodeKind::Automated || b.kind == NodeKind::Automated {
        NodeKind::Automated
    } else {
        NodeKind::Text
    };
    Ok(PromptNode {
        id,
        kind,
        text: format!("{}{}{}", a.text, JOIN_SEPARATOR, b.text),
        position: a.position,
        playlist: Vec::new(),
        playlist_index: 0,
        pluralise: a.pluralise || b.pluralise,
        adjustment_id: None,
        joined_from,
    })
}

/// Result of advancing a node's playlist.
#[derive(Debug, Clone, PartialEq)]
pub enum PlaylistStep {
    /// Text switched immediately.
    Advanced(PromptNode),
    /// Index advanced but the text stays on `old_text` until the fade ends.
    Fade {
        node: PromptNode,
        old_text: String,
        new_text: String,
    },
    /// The playlist is empty; nothing changed.
    Empty,
}

pub fn step_playlist(node: &PromptNode, fade_secs: f64) -> PlaylistStep {
    if node.playlist.is_empty() {
        return PlaylistStep::Empty;
    }
    let mut next = node.clone();
    next.playlist_index = (node.playlist_index + 1) % node.playlist.len();
    let new_text = next.playlist[next.playlist_index].clone();
    if fade_secs > 0.0 {
        PlaylistStep::Fade {
            old_text: node.text.clone(),
            new_text,
            node: next,
        }
    } else {
        next.text = new_text;
        PlaylistStep::Advanced(next)
    }
}

/// Canonical text form: `(text:W)` with two decimals, joined by `", "`.
pub fn serialize_weighted_prompts(prompts: &[WeightedPrompt]) -> String {
    prompts
        .iter()
        .map(|p| format!("({}:{:.2})", p.text, p.weight))
        .collect::<Vec<_>>()
        .join(", ")
}
