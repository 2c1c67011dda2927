use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::pixel::AdjustmentId;
use crate::preset::PresetError;
use crate::prompt::NodeId;
use crate::state::StateError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreateKind {
    #[default]
    Text,
    Automated,
    Adjustment,
}

/// A mutation queued for the engine. Applied between frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    CreateNode {
        #[serde(default)]
        text: String,
        #[serde(default)]
        kind: CreateKind,
        #[serde(default)]
        adjustment: Option<AdjustmentId>,
        #[serde(default)]
        x: Option<f64>,
        #[serde(default)]
        y: Option<f64>,
        #[serde(default)]
        playlist: Vec<String>,
    },
    EditNodeText {
        node_id: NodeId,
        text: String,
    },
    MoveNode {
        node_id: NodeId,
        x: f64,
        y: f64,
    },
    JoinNodes {
        a: NodeId,
        b: NodeId,
    },
    DeleteNode {
        node_id: NodeId,
    },
    SetPlaylist {
        node_id: NodeId,
        playlist: Vec<String>,
    },
    SetPluralise {
        node_id: NodeId,
        enabled: bool,
    },
    SetPixelParam {
        param: String,
        value: f64,
    },
    SetModelParams {
        #[serde(default)]
        strength: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
    SetLayout {
        #[serde(default)]
        active_fraction: Option<f64>,
        #[serde(default)]
        max_weight: Option<f64>,
    },
    SetAutopilot {
        #[serde(default)]
        enabled: Option<bool>,
        #[serde(default)]
        period: Option<f64>,
        #[serde(default)]
        crossfade_time: Option<f64>,
        #[serde(default)]
        enrolled_nodes: Option<Vec<NodeId>>,
    },
    SetPluraliser {
        #[serde(default)]
        enabled: Option<bool>,
        #[serde(default)]
        threshold: Option<f64>,
        #[serde(default)]
        min_area_fraction: Option<f64>,
        #[serde(default)]
        max_count_worded: Option<u32>,
    },
    Next {
        node_id: NodeId,
    },
    AddLfo {
        target: String,
        frequency: f64,
        depth: f64,
        #[serde(default)]
        base: f64,
        #[serde(default)]
        phase: f64,
    },
    RemoveLfo {
        index: usize,
    },
    MapSignal {
        signal_id: String,
        target: String,
        gain: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        stale_after: Option<f64>,
    },
    /// Latest value of an external signal.
    Signal {
        signal_id: String,
        value: f64,
    },
    LoadPreset {
        path: String,
    },
    SavePreset {
        path: String,
        #[serde(default)]
        name: String,
    },
    Snapshot,
    SetRate {
        fps: f64,
    },
    Start,
    Stop,
}

impl Command {
    pub const OPS: [&'static str; 23] = [
        "create_node",
        "edit_node_text",
        "move_node",
        "join_nodes",
        "delete_node",
        "set_playlist",
        "set_pluralise",
        "set_pixel_param",
        "set_model_params",
        "set_layout",
        "set_autopilot",
        "set_pluraliser",
        "next",
        "add_lfo",
        "remove_lfo",
        "map_signal",
        "signal",
        "load_preset",
        "save_preset",
        "snapshot",
        "set_rate",
        "start",
        "stop",
    ];
}

/// What an applied command produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done,
    NodeCreated(NodeId),
    Saved(PathBuf),
    Snapshot { frame_index: u64, path: PathBuf },
}

impl Outcome {
    pub fn to_json(&self) -> Value {
        match self {
            Outcome::Done => Value::Null,
            Outcome::NodeCreated(id) => json!({ "node_id": id }),
            Outcome::Saved(p) => json!({ "path": p.display().to_string() }),
            Outcome::Snapshot { frame_index, path } => {
                json!({ "frame_index": frame_index, "path": path.display().to_string() })
            }
        }
    }
}

/// A rejected command: a stable reason code plus a human message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandError {
    pub code: &'static str,
    pub message: String,
}

impl CommandError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CommandError {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CommandError {}

impl From<StateError> for CommandError {
    fn from(e: StateError) -> Self {
        CommandError::new(e.code(), e.to_string())
    }
}

impl From<PresetError> for CommandError {
    fn from(e: PresetError) -> Self {
        match e {
            PresetError::Io { .. } => CommandError::new("io_error", e.to_string()),
            _ => CommandError::new("invalid_preset", e.to_string()),
        }
    }
}

pub type CommandResult = Result<Outcome, CommandError>;

/// Resolves a client-supplied relative path inside `root`. Absolute paths
/// and `..` are refused so clients cannot reach outside it.
pub fn resolve_within(root: &Path, relative: &str) -> Result<PathBuf, CommandError> {
    let rel = Path::new(relative);
    if relative.is_empty() {
        return Err(CommandError::new("invalid_path", "path is empty"));
    }
    for c in rel.components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            _ => {
                return Err(CommandError::new(
                    "invalid_path",
                    format!("`{relative}` must be relative and stay inside the preset directory"),
                ))
            }
        }
    }
    Ok(root.join(rel))
}
