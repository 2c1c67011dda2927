//! Tank presets: the whole tank as one hand-editable JSON document.
//!
//! Documents are written canonically (sorted keys, shortest round-trip
//! floats, trailing newline) so identical states give identical bytes.
//! Fields this version does not know about are carried through a
//! load/save cycle untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::automation::{AutopilotConfig, ExternalSignalMap, Lfo, PluraliserConfig};
use crate::pixel::PixelChainParams;
use crate::prompt::{ModelParams, PromptNode, TankLayout};
use crate::state::{StateError, TankState};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed preset at `{field}`: {message}")]
    Malformed { field: String, message: String },
    #[error("unsupported preset format_version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u64),
    #[error("invalid preset field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl PresetError {
    /// Field path the diagnostic refers to, where there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            PresetError::Malformed { field, .. } | PresetError::Invalid { field, .. } => Some(field),
            PresetError::UnsupportedVersion(_) => Some("format_version"),
            PresetError::Io { .. } => None,
        }
    }
}

impl From<StateError> for PresetError {
    fn from(e: StateError) -> Self {
        let field = match &e {
            StateError::OutOfRange { field, .. } => field.clone(),
            _ => "nodes".to_owned(),
        };
        let reason = match e {
            StateError::OutOfRange { reason, .. } => reason,
            other => other.to_string(),
        };
        PresetError::Invalid { field, reason }
    }
}

/// Unknown parts of a loaded document, mirrored onto the known structure.
#[derive(Debug, Clone, PartialEq)]
enum Overlay {
    Unknown(Value),
    Object(BTreeMap<String, Overlay>),
    /// Elements keyed by their `id` field when they have one, else by index.
    Array(BTreeMap<ElementKey, Overlay>),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum ElementKey {
    Id(u64),
    Index(usize),
}

fn element_key(v: &Value, index: usize) -> ElementKey {
    match v.get("id").and_then(Value::as_u64) {
        Some(id) => ElementKey::Id(id),
        None => ElementKey::Index(index),
    }
}

fn extract_overlay(raw: &Value, known: &Value) -> Option<Overlay> {
    match (raw, known) {
        (Value::Object(r), Value::Object(k)) => {
            let mut out = BTreeMap::new();
            for (key, rv) in r {
                match k.get(key) {
                    None => {
                        out.insert(key.clone(), Overlay::Unknown(rv.clone()));
                    }
                    Some(kv) => {
                        if let Some(o) = extract_overlay(rv, kv) {
                            out.insert(key.clone(), o);
                        }
                    }
                }
            }
            (!out.is_empty()).then_some(Overlay::Object(out))
        }
        (Value::Array(r), Value::Array(k)) => {
            let known_by_key: BTreeMap<ElementKey, &Value> =
                k.iter().enumerate().map(|(i, v)| (element_key(v, i), v)).collect();
            let mut out = BTreeMap::new();
            for (i, rv) in r.iter().enumerate() {
                let key = element_key(rv, i);
                if let Some(kv) = known_by_key.get(&key) {
                    if let Some(o) = extract_overlay(rv, kv) {
                        out.insert(key, o);
                    }
                }
            }
            (!out.is_empty()).then_some(Overlay::Array(out))
        }
        _ => None,
    }
}

fn apply_overlay(target: &mut Value, overlay: &Overlay) {
    match (target, overlay) {
        (Value::Object(map), Overlay::Object(children)) => {
            for (key, child) in children {
                match child {
                    Overlay::Unknown(v) => {
                        map.entry(key.clone()).or_insert_with(|| v.clone());
                    }
                    nested => {
                        if let Some(t) = map.get_mut(key) {
                            apply_overlay(t, nested);
                        }
                    }
                }
            }
        }
        (Value::Array(items), Overlay::Array(children)) => {
            for (i, item) in items.iter_mut().enumerate() {
                if let Some(child) = children.get(&element_key(item, i)) {
                    apply_overlay(item, child);
                }
            }
        }
        _ => {}
    }
}

/// Serialisable snapshot of a whole tank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankPreset {
    pub format_version: u64,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub nodes: Vec<PromptNode>,
    #[serde(default)]
    pub layout: TankLayout,
    #[serde(default)]
    pub pixel_params: PixelChainParams,
    #[serde(default)]
    pub model_params: ModelParams,
    #[serde(default)]
    pub autopilot: AutopilotConfig,
    #[serde(default)]
    pub lfos: Vec<Lfo>,
    #[serde(default)]
    pub signal_maps: Vec<ExternalSignalMap>,
    #[serde(default)]
    pub pluraliser: PluraliserConfig,
    #[serde(skip)]
    unknown: Option<Overlay>,
}

impl TankPreset {
    /// Captures a state. Running fades are saved at their destination text
    /// and playlist progress is not saved.
    pub fn from_state(state: &TankState, name: impl Into<String>) -> Self {
        let nodes = state
            .nodes
            .iter()
            .map(|n| {
                let mut n = n.clone();
                if let Some(cf) = state.crossfades.get(&n.id) {
                    n.text = cf.new_text.clone();
                }
                n.playlist_index = 0;
                n
            })
            .collect();
        TankPreset {
            format_version: FORMAT_VERSION,
            name: name.into(),
            nodes,
            layout: state.layout,
            pixel_params: state.pixel,
            model_params: state.model,
            autopilot: state.autopilot.clone(),
            lfos: state.lfos.clone(),
            signal_maps: state
                .signal_maps
                .iter()
                .map(|m| ExternalSignalMap {
                    latest: None,
                    ..m.clone()
                })
                .collect(),
            pluraliser: state.pluraliser,
            unknown: None,
        }
    }

    /// Builds a validated state from this preset.
    pub fn to_state(&self) -> Result<TankState, PresetError> {
        let mut nodes = self.nodes.clone();
        nodes.sort_by_key(|n| n.id);
        for n in &mut nodes {
            n.playlist_index = 0;
        }
        let next_id = nodes.last().map_or(1, |n| n.id.0 + 1);
        let state = TankState {
            nodes,
            layout: self.layout,
            pixel: self.pixel_params,
            model: self.model_params,
            autopilot: self.autopilot.clone(),
            lfos: self.lfos.clone(),
            signal_maps: self.signal_maps.clone(),
            pluraliser: self.pluraliser,
            crossfades: BTreeMap::new(),
            next_id,
        };
        state.validate()?;
        Ok(state)
    }

    /// Canonical document text.
    pub fn to_document(&self) -> String {
        let mut value = serde_json::to_value(self).expect("preset types serialise to JSON");
        if let Some(overlay) = &self.unknown {
            apply_overlay(&mut value, overlay);
        }
        let mut text = serde_json::to_string_pretty(&sort_keys(value)).expect("JSON values serialise");
        text.push('\n');
        text
    }

    /// Parses and validates a document; nothing is returned unless every
    /// invariant holds.
    pub fn from_document(text: &str) -> Result<Self, PresetError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| PresetError::Malformed {
            field: String::new(),
            message: e.to_string(),
        })?;
        let version = raw
            .get("format_version")
            .ok_or_else(|| PresetError::Malformed {
                field: "format_version".into(),
                message: "missing".into(),
            })?;
        match version.as_u64() {
            Some(FORMAT_VERSION) => {}
            Some(v) => return Err(PresetError::UnsupportedVersion(v)),
            None => {
                return Err(PresetError::Malformed {
                    field: "format_version".into(),
                    message: "expected a non-negative integer".into(),
                })
            }
        }
        let mut preset: TankPreset =
            serde_path_to_error::deserialize(&raw).map_err(|e| PresetError::Malformed {
                field: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        preset.to_state()?;
        let known = serde_json::to_value(&preset).expect("preset types serialise to JSON");
        preset.unknown = extract_overlay(&raw, &known);
        Ok(preset)
    }

    /// Whether the loaded document carried fields this version ignores.
    pub fn has_unknown_fields(&self) -> bool {
        self.unknown.is_some()
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect::<Map<String, Value>>())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn save_preset(preset: &TankPreset, path: &Path) -> Result<(), PresetError> {
    fs::write(path, preset.to_document()).map_err(|source| PresetError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_preset(path: &Path) -> Result<TankPreset, PresetError> {
    let text = fs::read_to_string(path).map_err(|source| PresetError::Io {
        path: path.to_owned(),
        source,
    })?;
    TankPreset::from_document(&text)
}
