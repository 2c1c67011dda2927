use std::thread;
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use super::request::GenerationRequest;
use crate::par::{for_each_row_mut, Parallelism};
use crate::pixel::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend answered with status {0}")]
    Status(u16),
    #[error("backend response could not be decoded: {0}")]
    Decode(String),
    #[error("backend unreachable: {0}")]
    Transport(String),
    #[error("{width}x{height} exceeds the backend's limit of {max_width}x{max_height}")]
    Unsupported {
        width: u32,
        height: u32,
        max_width: u32,
        max_height: u32,
    },
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Timeout(_) => "timeout",
            BackendError::Status(_) => "status",
            BackendError::Decode(_) => "decode",
            BackendError::Transport(_) => "transport",
            BackendError::Unsupported { .. } => "unsupported",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Capabilities {
    pub name: String,
    pub max_width: u32,
    pub max_height: u32,
    /// Whether the backend takes the weighted list directly. Otherwise it
    /// receives the serialised prompt string.
    pub native_weighted_prompts: bool,
    /// Identical requests give identical images.
    pub deterministic: bool,
}

impl Capabilities {
    pub fn check(&self, img: &Image) -> Result<(), BackendError> {
        let (width, height) = img.dimensions();
        if width > self.max_width || height > self.max_height {
            return Err(BackendError::Unsupported {
                width,
                height,
                max_width: self.max_width,
                max_height: self.max_height,
            });
        }
        Ok(())
    }
}

/// Turns a request into an output image.
pub trait GeneratorBackend: Send {
    fn generate(&mut self, req: &GenerationRequest) -> Result<Image, BackendError>;
    fn capabilities(&self) -> Capabilities;
    /// Called when the frame rate changes, for backends that derive a
    /// timeout from it.
    fn set_frame_period(&mut self, _period: Duration) {}
}

/// Band layout and palette derived from a hash.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockPattern {
    palette: [[u8; 3]; 4],
    dir_a: (i64, i64),
    width_a: i64,
    offset_a: i64,
    dir_b: (i64, i64),
    width_b: i64,
    offset_b: i64,
}

fn signed_step(b: u8) -> i64 {
    (b % 7) as i64 - 3
}

impl MockPattern {
    pub fn new(seed: u64, prompt_string: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"prompttank-mock-v1");
        h.update(seed.to_be_bytes());
        h.update(prompt_string.as_bytes());
        let d: [u8; 32] = h.finalize().into();

        let mut palette = [[0u8; 3]; 4];
        for (i, c) in palette.iter_mut().enumerate() {
            c.copy_from_slice(&d[3 * i..3 * i + 3]);
        }
        let dir = |a: u8, b: u8| match (signed_step(a), signed_step(b)) {
            (0, 0) => (1, 1),
            v => v,
        };
        MockPattern {
            palette,
            dir_a: dir(d[12], d[13]),
            width_a: 6 + (d[14] % 58) as i64,
            offset_a: u16::from_be_bytes([d[15], d[16]]) as i64,
            dir_b: dir(d[17], d[18]),
            width_b: 16 + (d[19] % 112) as i64,
            offset_b: u16::from_be_bytes([d[20], d[21]]) as i64,
        }
    }

    /// Palette entry at `(x, y)`; integer arithmetic only.
    pub fn colour(&self, x: u32, y: u32) -> [u8; 3] {
        let (x, y) = (x as i64, y as i64);
        let a = (x * self.dir_a.0 + y * self.dir_a.1 + self.offset_a).div_euclid(self.width_a);
        let b = (x * self.dir_b.0 + y * self.dir_b.1 + self.offset_b).div_euclid(self.width_b);
        self.palette[((a + b) & 3) as usize]
    }
}

/// Deterministic stand-in for a diffusion model: blends the input toward a
/// banded pattern chosen by `(seed, prompt string)`, by `strength`.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub delay: Option<Duration>,
    pub parallelism: Parallelism,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_delay(delay: Duration) -> Self {
        MockBackend {
            delay: Some(delay),
            ..Self::default()
        }
    }
}

/// `out = (1 - strength) * image + strength * P`.
pub fn mock_generate(req: &GenerationRequest, mode: Parallelism) -> Image {
    let mut out = req.image.clone();
    let s = req.strength;
    if s == 0.0 || out.is_empty() {
        return out;
    }
    let pattern = MockPattern::new(req.seed, &req.prompt_string());
    let width = out.width() as usize;
    for_each_row_mut(out.data_mut(), width * 3, mode, |y, row| {
        for (x, px) in row.chunks_exact_mut(3).enumerate() {
            let p = pattern.colour(x as u32, y as u32);
            for c in 0..3 {
                let target = f64::from(p[c]) / 255.0;
                px[c] = ((1.0 - s) * f64::from(px[c]) + s * target) as f32;
            }
        }
    });
    out
}

impl GeneratorBackend for MockBackend {
    fn generate(&mut self, req: &GenerationRequest) -> Result<Image, BackendError> {
        self.capabilities().check(&req.image)?;
        if let Some(d) = self.delay {
            thread::sleep(d);
        }
        Ok(mock_generate(req, self.parallelism))
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            name: "mock".into(),
            max_width: 4096,
            max_height: 4096,
            native_weighted_prompts: false,
            deterministic: true,
        }
    }
}
