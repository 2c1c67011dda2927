//! Pixel prompting: the adjustment chain applied to every input frame.
//!
//! Stages run in a fixed order (brightness, contrast, gamma, colourise,
//! noise, Salford Mode). Channels are stored as `f32` in `[0, 1]`; each stage
//! evaluates in `f64` and rounds once on store. A stage at its neutral
//! setting is skipped outright, so a neutral chain is bit-exact.

use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Parallelism};

pub type Rgb = [f64; 3];

/// Rec. 709 luma.
pub fn luma(rgb: Rgb) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

#[derive(Debug, Error)]
pub enum PixelError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("pixel buffer holds {got} values, expected {expected}")]
    BadBuffer { expected: usize, got: usize },
    #[error("parameter {field}: {reason}")]
    Param { field: String, reason: String },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self, PixelError> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(PixelError::BadBuffer {
                expected,
                got: data.len(),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Image {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("buffer length matches dimensions")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, PixelError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>, PixelError> {
        let mut out = Vec::new();
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100));
        self.to_rgb8().write_with_encoder(encoder)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PixelError> {
        let img = image::load_from_memory(bytes)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn load(path: &Path) -> Result<Self, PixelError> {
        let img = image::open(path)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), PixelError> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }
}

/// The pixel adjustment an adjustment node drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentId {
    Brightness,
    Contrast,
    Gamma,
    Colourise,
    Noise,
    Salford,
}

impl AdjustmentId {
    pub const ALL: [AdjustmentId; 6] = [
        AdjustmentId::Brightness,
        AdjustmentId::Contrast,
        AdjustmentId::Gamma,
        AdjustmentId::Colourise,
        AdjustmentId::Noise,
        AdjustmentId::Salford,
    ];

    pub fn param(self) -> PixelParam {
        match self {
            AdjustmentId::Brightness => PixelParam::Brightness,
            AdjustmentId::Contrast => PixelParam::Contrast,
            AdjustmentId::Gamma => PixelParam::Gamma,
            AdjustmentId::Colourise => PixelParam::ColouriseAmount,
            AdjustmentId::Noise => PixelParam::NoiseGain,
            AdjustmentId::Salford => PixelParam::SalfordMix,
        }
    }

    /// Parameter value when the node sits at full weight.
    pub fn full_value(self) -> f64 {
        match self {
            AdjustmentId::Brightness => 0.5,
            AdjustmentId::Contrast => 2.5,
            AdjustmentId::Gamma => 0.5,
            AdjustmentId::Colourise => 1.0,
            AdjustmentId::Noise => 0.5,
            AdjustmentId::Salford => 1.0,
        }
    }
}

/// Real-valued chain parameters that automation may address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PixelParam {
    Brightness,
    Contrast,
    Gamma,
    ColouriseAmount,
    NoiseGain,
    SalfordMix,
    SalfordContrast,
    SalfordThreshold,
    SalfordTintStrength,
}

impl PixelParam {
    pub const ALL: [PixelParam; 9] = [
        PixelParam::Brightness,
        PixelParam::Contrast,
        PixelParam::Gamma,
        PixelParam::ColouriseAmount,
        PixelParam::NoiseGain,
        PixelParam::SalfordMix,
        PixelParam::SalfordContrast,
        PixelParam::SalfordThreshold,
        PixelParam::SalfordTintStrength,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PixelParam::Brightness => "brightness",
            PixelParam::Contrast => "contrast",
            PixelParam::Gamma => "gamma",
            PixelParam::ColouriseAmount => "colourise_amount",
            PixelParam::NoiseGain => "noise_gain",
            PixelParam::SalfordMix => "salford_mix",
            PixelParam::SalfordContrast => "salford_contrast",
            PixelParam::SalfordThreshold => "salford_threshold",
            PixelParam::SalfordTintStrength => "salford_tint_strength",
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            PixelParam::Brightness => (-1.0, 1.0),
            PixelParam::Contrast | PixelParam::SalfordContrast => (0.0, 4.0),
            PixelParam::Gamma => (0.2, 5.0),
            PixelParam::ColouriseAmount
            | PixelParam::NoiseGain
            | PixelParam::SalfordMix
            | PixelParam::SalfordThreshold
            | PixelParam::SalfordTintStrength => (0.0, 1.0),
        }
    }

    pub fn get(self, p: &PixelChainParams) -> f64 {
        match self {
            PixelParam::Brightness => p.brightness,
            PixelParam::Contrast => p.contrast,
            PixelParam::Gamma => p.gamma,
            PixelParam::ColouriseAmount => p.colourise_amount,
            PixelParam::NoiseGain => p.noise_gain,
            PixelParam::SalfordMix => p.salford_mix,
            PixelParam::SalfordContrast => p.salford_contrast,
            PixelParam::SalfordThreshold => p.salford_threshold,
            PixelParam::SalfordTintStrength => p.salford_tint_strength,
        }
    }

    pub fn set(self, p: &mut PixelChainParams, v: f64) {
        let slot = match self {
            PixelParam::Brightness => &mut p.brightness,
            PixelParam::Contrast => &mut p.contrast,
            PixelParam::Gamma => &mut p.gamma,
            PixelParam::ColouriseAmount => &mut p.colourise_amount,
            PixelParam::NoiseGain => &mut p.noise_gain,
            PixelParam::SalfordMix => &mut p.salford_mix,
            PixelParam::SalfordContrast => &mut p.salford_contrast,
            PixelParam::SalfordThreshold => &mut p.salford_threshold,
            PixelParam::SalfordTintStrength => &mut p.salford_tint_strength,
        };
        *slot = v;
    }
}

impl FromStr for PixelParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PixelParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown pixel parameter `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelChainParams {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub colourise_amount: f64,
    pub colourise_tint: Rgb,
    pub noise_gain: f64,
    pub noise_scale: u32,
    pub noise_seed: u64,
    pub salford_mix: f64,
    pub salford_contrast: f64,
    pub salford_threshold: f64,
    pub salford_tint: Rgb,
    pub salford_tint_strength: f64,
}

impl Default for PixelChainParams {
    fn default() -> Self {
        PixelChainParams {
            brightness: 0.0,
            contrast: 1.0,
            gamma: 1.0,
            colourise_amount: 0.0,
            colourise_tint: [1.0, 1.0, 1.0],
            noise_gain: 0.0,
            noise_scale: 1,
            noise_seed: 0,
            salford_mix: 0.0,
            salford_contrast: 2.0,
            salford_threshold: 0.7,
            salford_tint: [0.0, 0.9, 1.0],
            salford_tint_strength: 0.8,
        }
    }
}

impl PixelChainParams {
    /// Checks every parameter range; the error names the offending field.
    pub fn validate(&self) -> Result<(), PixelError> {
        for param in PixelParam::ALL {
            let v = param.get(self);
            let (lo, hi) = param.range();
            if !(lo..=hi).contains(&v) {
                return Err(PixelError::Param {
                    field: param.name().to_owned(),
                    reason: format!("{v} outside [{lo}, {hi}]"),
                });
            }
        }
        if self.noise_scale == 0 {
            return Err(PixelError::Param {
                field: "noise_scale".into(),
                reason: "must be positive".into(),
            });
        }
        for (field, tint) in [
            ("colourise_tint", self.colourise_tint),
            ("salford_tint", self.salford_tint),
        ] {
            if tint.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(PixelError::Param {
                    field: field.to_owned(),
                    reason: "channels must lie in [0, 1]".into(),
                });
            }
        }
        Ok(())
    }
}

fn store(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

fn map_channels(img: &mut Image, mode: Parallelism, f: impl Fn(f64) -> f64 + Send + Sync) {
    let row = img.width as usize * 3;
    if row == 0 {
        return;
    }
    par::for_each_row_mut(&mut img.data, row, mode, |_, px| {
        for v in px.iter_mut() {
            *v = store(f(*v as f64));
        }
    });
}

fn map_pixels(img: &mut Image, mode: Parallelism, f: impl Fn(Rgb) -> Rgb + Send + Sync) {
    let row = img.width as usize * 3;
    if row == 0 {
        return;
    }
    par::for_each_row_mut(&mut img.data, row, mode, |_, px| {
        for c in px.chunks_exact_mut(3) {
            let out = f([c[0] as f64, c[1] as f64, c[2] as f64]);
            c[0] = store(out[0]);
            c[1] = store(out[1]);
            c[2] = store(out[2]);
        }
    });
}

fn brightness_in_place(img: &mut Image, b: f64, mode: Parallelism) {
    if b != 0.0 {
        map_channels(img, mode, |v| v + b);
    }
}

fn contrast_in_place(img: &mut Image, c: f64, mode: Parallelism) {
    if c != 1.0 {
        map_channels(img, mode, |v| contrast_value(v, c));
    }
}

fn contrast_value(v: f64, c: f64) -> f64 {
    ((v - 0.5) * c + 0.5).clamp(0.0, 1.0)
}

fn gamma_in_place(img: &mut Image, g: f64, mode: Parallelism) {
    if g != 1.0 {
        map_channels(img, mode, |v| v.powf(g));
    }
}

fn colourise_in_place(img: &mut Image, amount: f64, tint: Rgb, mode: Parallelism) {
    if amount == 0.0 {
        return;
    }
    map_pixels(img, mode, |px| {
        let l = luma(px);
        std::array::from_fn(|i| (1.0 - amount) * px[i] + amount * l * tint[i])
    });
}

fn noise_in_place(img: &mut Image, gain: f64, scale: u32, seed: u64, mode: Parallelism) {
    if gain == 0.0 {
        return;
    }
    let width = img.width as usize;
    if width == 0 {
        return;
    }
    let scale = scale.max(1);
    par::for_each_row_mut(&mut img.data, width * 3, mode, |y, px| {
        let cell_y = y as u32 / scale;
        for (x, c) in px.chunks_exact_mut(3).enumerate() {
            let n = noise_cell(seed, x as u32 / scale, cell_y);
            let d = gain * (n - 0.5);
            for v in c.iter_mut() {
                *v = store(*v as f64 + d);
            }
        }
    });
}

fn salford_pixel(px: Rgb, mix: f64, p: &PixelChainParams) -> Rgb {
    let s: Rgb = std::array::from_fn(|i| contrast_value(1.0 - px[i], p.salford_contrast));
    let s = if luma(s) > p.salford_threshold {
        let k = p.salford_tint_strength;
        std::array::from_fn(|i| (1.0 - k) * s[i] + k * p.salford_tint[i])
    } else {
        s
    };
    std::array::from_fn(|i| (1.0 - mix) * px[i] + mix * s[i])
}

fn salford_in_place(img: &mut Image, mix: f64, p: &PixelChainParams, mode: Parallelism) {
    if mix == 0.0 {
        return;
    }
    let p = *p;
    map_pixels(img, mode, move |px| salford_pixel(px, mix, &p));
}

/// Counter-based hash of a noise cell, mapped to `[0, 1)`.
pub fn noise_cell(seed: u64, cell_x: u32, cell_y: u32) -> f64 {
    let counter = ((cell_x as u64) << 32) | cell_y as u64;
    let h = fmix64(fmix64(seed ^ 0x9E37_79B9_7F4A_7C15) ^ counter);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

// MurmurHash3 / splitmix64 finaliser.
pub(crate) fn fmix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}

pub fn apply_brightness(img: &Image, b: f64) -> Image {
    let mut out = img.clone();
    brightness_in_place(&mut out, b, Parallelism::default());
    out
}

pub fn apply_contrast(img: &Image, c: f64) -> Image {
    let mut out = img.clone();
    contrast_in_place(&mut out, c, Parallelism::default());
    out
}

pub fn apply_gamma(img: &Image, g: f64) -> Image {
    let mut out = img.clone();
    gamma_in_place(&mut out, g, Parallelism::default());
    out
}

pub fn apply_colourise(img: &Image, amount: f64, tint: Rgb) -> Image {
    let mut out = img.clone();
    colourise_in_place(&mut out, amount, tint, Parallelism::default());
    out
}

/// Overlays static value noise: one uniform value per `scale`×`scale` cell,
/// identical on every call for the same seed, size and scale.
pub fn apply_noise(img: &Image, gain: f64, scale: u32, seed: u64) -> Image {
    let mut out = img.clone();
    noise_in_place(&mut out, gain, scale, seed, Parallelism::default());
    out
}

/// Crossfades toward the Salford Mode network: invert, boost contrast, then
/// pull bright areas toward the tint. Shadows in the input end up as the
/// tinted highlights.
pub fn apply_salford(img: &Image, mix: f64, p: &PixelChainParams) -> Image {
    let mut out = img.clone();
    salford_in_place(&mut out, mix, p, Parallelism::default());
    out
}

pub fn apply_chain(img: &Image, p: &PixelChainParams) -> Result<Image, PixelError> {
    apply_chain_with(img, p, Parallelism::default())
}

pub fn apply_chain_with(
    img: &Image,
    p: &PixelChainParams,
    mode: Parallelism,
) -> Result<Image, PixelError> {
    if img.is_empty() {
        return Err(PixelError::EmptyImage);
    }
    p.validate()?;
    let mut out = img.clone();
    brightness_in_place(&mut out, p.brightness, mode);
    contrast_in_place(&mut out, p.contrast, mode);
    gamma_in_place(&mut out, p.gamma, mode);
    colourise_in_place(&mut out, p.colourise_amount, p.colourise_tint, mode);
    noise_in_place(&mut out, p.noise_gain, p.noise_scale, p.noise_seed, mode);
    salford_in_place(&mut out, p.salford_mix, p, mode);
    Ok(out)
}
