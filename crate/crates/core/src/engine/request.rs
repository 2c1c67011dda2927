use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::pixel::Image;
use crate::prompt::{serialize_weighted_prompts, WeightedPrompt};

/// Everything a backend needs to produce one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Post-processed input.
    pub image: Image,
    pub prompts: Vec<WeightedPrompt>,
    pub strength: f64,
    pub seed: u64,
    pub frame_index: u64,
    pub timestamp: f64,
}

impl GenerationRequest {
    pub fn prompt_string(&self) -> String {
        serialize_weighted_prompts(&self.prompts)
    }

    /// SHA-256 over every field except `frame_index` and `timestamp`.
    /// Floats are hashed by bit pattern, so any change is visible.
    pub fn digest(&self) -> RequestDigest {
        let mut h = Sha256::new();
        h.update(b"prompttank-request-v1");
        h.update(self.image.width().to_be_bytes());
        h.update(self.image.height().to_be_bytes());
        let mut buf = Vec::with_capacity(self.image.data().len() * 4);
        for v in self.image.data() {
            buf.extend_from_slice(&v.to_bits().to_be_bytes());
        }
        h.update(&buf);
        h.update((self.prompts.len() as u64).to_be_bytes());
        for p in &self.prompts {
            h.update((p.text.len() as u64).to_be_bytes());
            h.update(p.text.as_bytes());
            h.update(p.weight.to_bits().to_be_bytes());
        }
        h.update(self.strength.to_bits().to_be_bytes());
        h.update(self.seed.to_be_bytes());
        RequestDigest(h.finalize().into())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestDigest(pub [u8; 32]);

impl fmt::Display for RequestDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for RequestDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RequestDigest({self})")
    }
}

impl FromStr for RequestDigest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.is_ascii() {
            return Err("digest must be 64 hex characters".into());
        }
        let mut out = [0u8; 32];
        for (i, b) in out.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        Ok(RequestDigest(out))
    }
}

impl Serialize for RequestDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RequestDigest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// What a frame was generated from, kept for snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub timestamp: f64,
    pub frame_index: u64,
    pub request_digest: RequestDigest,
    /// Effective value of every parameter, after automation.
    pub params: BTreeMap<String, f64>,
    pub prompts: Vec<WeightedPrompt>,
    pub prompt_string: String,
    pub seed: u64,
    pub strength: f64,
    pub width: u32,
    pub height: u32,
}

/// A generated output frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: Image,
    pub request_digest: RequestDigest,
    pub frame_index: u64,
    pub latency_ms: f64,
    pub meta: Arc<FrameMeta>,
}
