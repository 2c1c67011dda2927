//! Parameter automation: prompt crossfades, LFOs, external signals, the
//! autopilot and the pluraliser.
//!
//! Everything here evaluates as a pure function of a timestamp and the
//! current tank state. Mutation happens only in the engine, between frames.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::pixel::{luma, Image, PixelChainParams, PixelParam};
use crate::prompt::{step_playlist, weight_for_position, ModelParams, NodeId, PlaylistStep, PromptNode, TankLayout};
use crate::state::TankState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutomationError {
    #[error("unknown parameter path `{0}`")]
    UnknownTarget(String),
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> AutomationError {
    AutomationError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// An automatable parameter, written `pixel.<name>`, `model.strength` or
/// `node.<id>.weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamPath {
    Pixel(PixelParam),
    ModelStrength,
    NodeWeight(NodeId),
}

impl ParamPath {
    pub fn range(&self, layout: &TankLayout) -> (f64, f64) {
        match self {
            ParamPath::Pixel(p) => p.range(),
            ParamPath::ModelStrength => (0.0, 1.0),
            ParamPath::NodeWeight(_) => (0.0, layout.max_weight),
        }
    }

    /// Parses a path and checks it refers to something that exists.
    pub fn bind(path: &str, nodes: &[PromptNode]) -> Result<ParamPath, AutomationError> {
        let parsed: ParamPath = path.parse()?;
        if let ParamPath::NodeWeight(id) = parsed {
            if !nodes.iter().any(|n| n.id == id) {
                return Err(AutomationError::UnknownTarget(path.to_owned()));
            }
        }
        Ok(parsed)
    }
}

impl fmt::Display for ParamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamPath::Pixel(p) => write!(f, "pixel.{}", p.name()),
            ParamPath::ModelStrength => f.write_str("model.strength"),
            ParamPath::NodeWeight(id) => write!(f, "node.{id}.weight"),
        }
    }
}

impl FromStr for ParamPath {
    type Err = AutomationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || AutomationError::UnknownTarget(s.to_owned());
        let parts: Vec<&str> = s.split('.').collect();
        match parts.as_slice() {
            ["pixel", name] => name.parse().map(ParamPath::Pixel).map_err(|_| unknown()),
            ["model", "strength"] => Ok(ParamPath::ModelStrength),
            ["node", id, "weight"] => id
                .parse()
                .map(|id| ParamPath::NodeWeight(NodeId(id)))
                .map_err(|_| unknown()),
            _ => Err(unknown()),
        }
    }
}

impl Serialize for ParamPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A timed hand-off of one node's weight from its old text to a new one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossfade {
    pub node_id: NodeId,
    pub old_text: String,
    pub new_text: String,
    pub start_time: f64,
    pub duration: f64,
    pub base_weight: f64,
}

impl Crossfade {
    pub fn new(
        node_id: NodeId,
        old_text: impl Into<String>,
        new_text: impl Into<String>,
        start_time: f64,
        duration: f64,
        base_weight: f64,
    ) -> Result<Self, AutomationError> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(invalid("duration", "must be positive"));
        }
        if !(base_weight >= 0.0 && base_weight.is_finite()) {
            return Err(invalid("base_weight", "must be non-negative"));
        }
        Ok(Crossfade {
            node_id,
            old_text: old_text.into(),
            new_text: new_text.into(),
            start_time,
            duration,
            base_weight,
        })
    }

    pub fn progress(&self, t: f64) -> f64 {
        // Compare against the end time directly: `t - start` can round
        // below `duration` even when `t == start + duration`.
        if t >= self.start_time + self.duration {
            return 1.0;
        }
        ((t - self.start_time) / self.duration).clamp(0.0, 1.0)
    }

    pub fn is_complete(&self, t: f64) -> bool {
        self.progress(t) >= 1.0
    }
}

/// `(old, new)` weights at time `t`. The incoming share is snapped to the
/// ulp grid of `base_weight`, which makes `old + new == base_weight` hold
/// exactly in floating point.
pub fn crossfade_weights(cf: &Crossfade, t: f64) -> (f64, f64) {
    let base = cf.base_weight;
    let p = cf.progress(t);
    if base <= 0.0 || p <= 0.0 {
        return (base.max(0.0), 0.0);
    }
    if p >= 1.0 {
        return (0.0, base);
    }
    let ulp = f64::from_bits(base.to_bits() + 1) - base;
    let new = ((p * base / ulp).round() * ulp).clamp(0.0, base);
    (base - new, new)
}

/// Low-frequency oscillator bound to a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lfo {
    pub target: ParamPath,
    pub frequency: f64,
    pub depth: f64,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Lfo {
    pub fn validate(&self) -> Result<(), AutomationError> {
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(invalid("frequency", "must be positive"));
        }
        if !(self.depth >= 0.0 && self.depth.is_finite()) {
            return Err(invalid("depth", "must be non-negative"));
        }
        if !self.base.is_finite() || !self.phase.is_finite() {
            return Err(invalid("base", "must be finite"));
        }
        Ok(())
    }

    /// Unclamped oscillator output.
    pub fn raw(&self, t: f64) -> f64 {
        self.base + self.depth * (TAU * self.frequency * t + self.phase).sin()
    }
}

pub fn lfo_value(l: &Lfo, t: f64, range: (f64, f64)) -> f64 {
    l.raw(t).clamp(range.0, range.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalSample {
    pub value: f64,
    pub timestamp: f64,
}

fn default_stale_after() -> f64 {
    1.0
}

/// Maps an incoming `[0, 1]` envelope (e.g. audio amplitude) onto a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSignalMap {
    pub signal_id: String,
    pub target: ParamPath,
    pub gain: f64,
    pub offset: f64,
    #[serde(default = "default_stale_after")]
    pub stale_after: f64,
    #[serde(skip)]
    pub latest: Option<SignalSample>,
}

impl ExternalSignalMap {
    pub fn new(signal_id: impl Into<String>, target: ParamPath, gain: f64, offset: f64) -> Self {
        ExternalSignalMap {
            signal_id: signal_id.into(),
            target,
            gain,
            offset,
            stale_after: default_stale_after(),
            latest: None,
        }
    }

    pub fn validate(&self) -> Result<(), AutomationError> {
        if self.signal_id.is_empty() {
            return Err(invalid("signal_id", "must not be empty"));
        }
        if !self.gain.is_finite() || !self.offset.is_finite() {
            return Err(invalid("gain", "gain and offset must be finite"));
        }
        if self.stale_after.is_nan() || self.stale_after <= 0.0 {
            return Err(invalid("stale_after", "must be positive"));
        }
        Ok(())
    }

    /// Contribution before clamping; stale or missing signals give the offset.
    pub fn raw(&self, now: f64) -> f64 {
        match self.latest {
            Some(s) if now - s.timestamp <= self.stale_after => self.offset + self.gain * s.value,
            _ => self.offset,
        }
    }
}

pub fn external_value(m: &ExternalSignalMap, now: f64, range: (f64, f64)) -> f64 {
    m.raw(now).clamp(range.0, range.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutopilotConfig {
    pub enabled: bool,
    pub period: f64,
    pub crossfade_time: f64,
    pub enrolled_nodes: BTreeSet<NodeId>,
}

impl Default for AutopilotConfig {
    fn default() -> Self {
        AutopilotConfig {
            enabled: false,
            period: 20.0,
            crossfade_time: 4.0,
            enrolled_nodes: BTreeSet::new(),
        }
    }
}

impl AutopilotConfig {
    pub fn validate(&self) -> Result<(), AutomationError> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(invalid("period", "must be positive"));
        }
        if !(self.crossfade_time >= 0.0 && self.crossfade_time.is_finite()) {
            return Err(invalid("crossfade_time", "must be non-negative"));
        }
        Ok(())
    }

    /// Non-fatal configuration warnings.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.crossfade_time >= self.period {
            out.push(format!(
                "autopilot crossfade ({}s) is not shorter than its period ({}s); fades will be cut short",
                self.crossfade_time, self.period
            ));
        }
        out
    }
}

/// A playlist step produced by automation, already resolved against the node.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaylistAction {
    pub node_id: NodeId,
    pub step: PlaylistStep,
}

/// Steps every enrolled node once `period` has elapsed since `last_fire`.
pub fn autopilot_tick(
    cfg: &AutopilotConfig,
    t: f64,
    last_fire: &mut f64,
    nodes: &[PromptNode],
) -> Vec<PlaylistAction> {
    if !cfg.enabled || t - *last_fire < cfg.period {
        return Vec::new();
    }
    *last_fire = t;
    nodes
        .iter()
        .filter(|n| cfg.enrolled_nodes.contains(&n.id))
        .filter_map(|n| match step_playlist(n, cfg.crossfade_time) {
            PlaylistStep::Empty => None,
            step => Some(PlaylistAction { node_id: n.id, step }),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PluraliserConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub min_area_fraction: f64,
    pub max_count_worded: u32,
}

impl Default for PluraliserConfig {
    fn default() -> Self {
        PluraliserConfig {
            enabled: false,
            threshold: 0.35,
            min_area_fraction: 0.01,
            max_count_worded: 9,
        }
    }
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

impl PluraliserConfig {
    pub fn validate(&self) -> Result<(), AutomationError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid("threshold", "must lie strictly between 0 and 1"));
        }
        if !(self.min_area_fraction > 0.0 && self.min_area_fraction < 1.0) {
            return Err(invalid("min_area_fraction", "must lie strictly between 0 and 1"));
        }
        if self.max_count_worded as usize >= NUMBER_WORDS.len() {
            return Err(invalid("max_count_worded", "number words stop at twenty"));
        }
        Ok(())
    }
}

/// Something that counts people in a frame.
pub trait FigureDetector {
    fn count(&self, img: &Image) -> usize;
}

/// Counts dark 4-connected regions, the silhouettes cast in front of a
/// light-prompting camera.
#[derive(Debug, Clone, Copy)]
pub struct DarkRegionDetector(pub PluraliserConfig);

impl FigureDetector for DarkRegionDetector {
    fn count(&self, img: &Image) -> usize {
        count_figures(img, &self.0)
    }
}

/// Dark-pixel mask: `luma < threshold`.
pub fn dark_mask(img: &Image, threshold: f64) -> Vec<bool> {
    img.data()
        .chunks_exact(3)
        .map(|c| luma([c[0] as f64, c[1] as f64, c[2] as f64]) < threshold)
        .collect()
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Two-pass union-find labelling of the dark mask; regions smaller than
/// `min_area_fraction` of the frame are ignored.
pub fn count_figures(img: &Image, cfg: &PluraliserConfig) -> usize {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return 0;
    }
    let mask = dark_mask(img, cfg.threshold);
    let mut labels = vec![u32::MAX; w * h];
    let mut parent: Vec<u32> = Vec::new();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let up = (y > 0 && mask[i - w]).then(|| labels[i - w]);
            let left = (x > 0 && mask[i - 1]).then(|| labels[i - 1]);
            labels[i] = match (up, left) {
                (None, None) => {
                    let l = parent.len() as u32;
                    parent.push(l);
                    l
                }
                (Some(a), None) | (None, Some(a)) => a,
                (Some(a), Some(b)) => {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    let (lo, hi) = (ra.min(rb), ra.max(rb));
                    parent[hi as usize] = lo;
                    lo
                }
            };
        }
    }

    let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != u32::MAX) {
        let root = find(&mut parent, l);
        *areas.entry(root).or_default() += 1;
    }
    let min_area = cfg.min_area_fraction * (w * h) as f64;
    areas.values().filter(|&&a| a as f64 >= min_area).count()
}

/// Prefixes a count to the prompt text: `("priests", 2)` becomes
/// `"two priests"`. Counts below two leave the text alone.
pub fn pluralise_text(base: &str, count: usize, cfg: &PluraliserConfig) -> String {
    if count < 2 {
        return base.to_owned();
    }
    let worded = cfg.max_count_worded as usize;
    match NUMBER_WORDS.get(count) {
        Some(word) if count <= worded => format!("{word} {base}"),
        _ => format!("{count} {base}"),
    }
}

/// One node mid-crossfade, sampled at a given instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossfadeSample {
    pub node_id: NodeId,
    pub old_text: String,
    pub new_text: String,
    pub old_weight: f64,
    pub new_weight: f64,
}

/// The parameters a frame is generated with once all modulation is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedParams {
    pub pixel: PixelChainParams,
    pub model: ModelParams,
    /// Weights for modulated nodes; everything else uses its position.
    pub weight_overrides: BTreeMap<NodeId, f64>,
    pub crossfades: Vec<CrossfadeSample>,
}

impl ResolvedParams {
    /// Flat `path -> value` view of every real parameter, including the
    /// effective weight of every text-carrying node.
    pub fn to_map(&self, state: &TankState) -> BTreeMap<String, f64> {
        let mut map = BTreeMap::new();
        for p in PixelParam::ALL {
            map.insert(ParamPath::Pixel(p).to_string(), p.get(&self.pixel));
        }
        map.insert(ParamPath::ModelStrength.to_string(), self.model.strength);
        for node in state.nodes.iter().filter(|n| n.carries_text()) {
            let w = self
                .weight_overrides
                .get(&node.id)
                .copied()
                .unwrap_or_else(|| weight_for_position(node.position.y, &state.layout));
            map.insert(ParamPath::NodeWeight(node.id).to_string(), w);
        }
        for cf in &self.crossfades {
            map.insert(format!("node.{}.fade_out", cf.node_id), cf.old_weight);
            map.insert(format!("node.{}.fade_in", cf.node_id), cf.new_weight);
        }
        map
    }
}

fn base_value(state: &TankState, path: ParamPath, pixel: &PixelChainParams) -> f64 {
    match path {
        ParamPath::Pixel(p) => p.get(pixel),
        ParamPath::ModelStrength => state.model.strength,
        ParamPath::NodeWeight(id) => state
            .node(id)
            .map(|n| weight_for_position(n.position.y, &state.layout))
            .unwrap_or(0.0),
    }
}

/// Evaluates every modulator at time `t`.
///
/// Adjustment nodes first move their pixel parameter from its base value
/// toward the adjustment's full value in proportion to their weight. LFOs and
/// external signals on the same parameter are then summed around that value
/// and clamped once. Active crossfades replace their node's weight.
pub fn resolve_parameters(state: &TankState, t: f64) -> ResolvedParams {
    let mut pixel = state.pixel;
    for node in &state.nodes {
        let Some(adj) = node.adjustment_id else {
            continue;
        };
        let w = weight_for_position(node.position.y, &state.layout) / state.layout.max_weight;
        if w > 0.0 {
            let param = adj.param();
            let base = param.get(&pixel);
            param.set(&mut pixel, base + w * (adj.full_value() - base));
        }
    }

    let mut deviations: BTreeMap<ParamPath, f64> = BTreeMap::new();
    for l in &state.lfos {
        *deviations.entry(l.target).or_default() += l.raw(t);
    }
    for m in &state.signal_maps {
        *deviations.entry(m.target).or_default() += m.raw(t);
    }

    let mut model = state.model;
    let mut weight_overrides = BTreeMap::new();
    let base_pixel = pixel;
    for (path, dev) in deviations {
        if let ParamPath::NodeWeight(id) = path {
            if state.node(id).is_none() {
                continue;
            }
        }
        let (lo, hi) = path.range(&state.layout);
        let value = (base_value(state, path, &base_pixel) + dev).clamp(lo, hi);
        match path {
            ParamPath::Pixel(p) => p.set(&mut pixel, value),
            ParamPath::ModelStrength => model.strength = value,
            ParamPath::NodeWeight(id) => {
                weight_overrides.insert(id, value);
            }
        }
    }

    let crossfades = state
        .crossfades
        .values()
        .map(|cf| {
            weight_overrides.remove(&cf.node_id);
            let (old_weight, new_weight) = crossfade_weights(cf, t);
            CrossfadeSample {
                node_id: cf.node_id,
                old_text: cf.old_text.clone(),
                new_text: cf.new_text.clone(),
                old_weight,
                new_weight,
            }
        })
        .collect();

    ResolvedParams {
        pixel,
        model,
        weight_overrides,
        crossfades,
    }
}
