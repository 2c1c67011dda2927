use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pixel::{Image, PixelError};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("{path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: PixelError,
    },
    #[error("{0}: no images found")]
    Empty(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unrecognised source `{0}` (expected still:<path>, dir:<path> or synthetic)")]
    Spec(String),
}

/// Where input frames come from. Every frame has the configured resolution.
pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Result<Image, SourceError>;
    fn resolution(&self) -> (u32, u32);
}

fn fit(img: Image, (w, h): (u32, u32)) -> Image {
    if img.dimensions() == (w, h) {
        return img;
    }
    Image::from_rgb8(&imageops::resize(&img.to_rgb8(), w, h, FilterType::Triangle))
}

fn load_fitted(path: &Path, size: (u32, u32)) -> Result<Image, SourceError> {
    Image::load(path)
        .map(|img| fit(img, size))
        .map_err(|source| SourceError::Load {
            path: path.to_owned(),
            source,
        })
}

/// Loops one image forever.
pub struct StillSource {
    image: Image,
}

impl StillSource {
    pub fn open(path: &Path, size: (u32, u32)) -> Result<Self, SourceError> {
        Ok(StillSource {
            image: load_fitted(path, size)?,
        })
    }

    pub fn from_image(image: Image, size: (u32, u32)) -> Self {
        StillSource {
            image: fit(image, size),
        }
    }
}

impl FrameSource for StillSource {
    fn next_frame(&mut self) -> Result<Image, SourceError> {
        Ok(self.image.clone())
    }

    fn resolution(&self) -> (u32, u32) {
        self.image.dimensions()
    }
}

/// Loops the images of a directory in file-name order.
pub struct DirSource {
    files: Vec<PathBuf>,
    next: usize,
    size: (u32, u32),
}

impl DirSource {
    pub fn open(dir: &Path, size: (u32, u32)) -> Result<Self, SourceError> {
        let entries = fs::read_dir(dir).map_err(|source| SourceError::Io {
            path: dir.to_owned(),
            source,
        })?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(SourceError::Empty(dir.to_owned()));
        }
        Ok(DirSource { files, next: 0, size })
    }
}

impl FrameSource for DirSource {
    fn next_frame(&mut self) -> Result<Image, SourceError> {
        let path = &self.files[self.next];
        self.next = (self.next + 1) % self.files.len();
        load_fitted(path, self.size)
    }

    fn resolution(&self) -> (u32, u32) {
        self.size
    }
}

const BACKGROUND_TOP: f32 = 0.92;
const BACKGROUND_BOTTOM: f32 = 0.72;
const FIGURE: f32 = 0.08;

fn background(w: u32, h: u32) -> Image {
    let mut img = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        let t = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
        let v = BACKGROUND_TOP + (BACKGROUND_BOTTOM - BACKGROUND_TOP) * t;
        for x in 0..w {
            img.set_pixel(x, y, [v, v * 0.97, v * 0.9]);
        }
    }
    img
}

fn fill_ellipse(img: &mut Image, cx: f64, cy: f64, rx: f64, ry: f64) {
    let (w, h) = img.dimensions();
    let x0 = (cx - rx).floor().max(0.0) as u32;
    let x1 = ((cx + rx).ceil() as u32).min(w.saturating_sub(1));
    let y0 = (cy - ry).floor().max(0.0) as u32;
    let y1 = ((cy + ry).ceil() as u32).min(h.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.set_pixel(x, y, [FIGURE; 3]);
            }
        }
    }
}

const GRID_COLS: u32 = 3;
const GRID_ROWS: u32 = 2;
const CELL_INSET: f64 = 4.0;

/// Most figures [`silhouette_fixture`] can place.
pub const MAX_FIXTURE_FIGURES: usize = (GRID_COLS * GRID_ROWS) as usize;

/// A still with exactly `k` disjoint dark figures on a light background,
/// plus a few dark specks too small to count as figures.
///
/// Figures sit in separate cells of a 3x2 grid so they never touch. At
/// 96x96 and above every figure covers more than 1% of the frame.
pub fn silhouette_fixture(width: u32, height: u32, k: usize, seed: u64) -> Image {
    assert!(k <= MAX_FIXTURE_FIGURES, "at most {MAX_FIXTURE_FIGURES} figures fit");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(width, height);
    let cell_w = width / GRID_COLS;
    let cell_h = height / GRID_ROWS;

    let mut cells: Vec<u32> = (0..GRID_COLS * GRID_ROWS).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.gen_range(0..=i));
    }
    for (n, &cell) in cells.iter().enumerate() {
        let x0 = (cell % GRID_COLS) * cell_w;
        let y0 = (cell / GRID_COLS) * cell_h;
        if n < k {
            let max_rx = cell_w as f64 / 2.0 - CELL_INSET;
            let max_ry = cell_h as f64 / 2.0 - CELL_INSET;
            let rx = max_rx * rng.gen_range(0.6..=1.0);
            let ry = max_ry * rng.gen_range(0.6..=1.0);
            let cx = x0 as f64 + cell_w as f64 / 2.0 + rng.gen_range(-1.0..=1.0) * (max_rx - rx);
            let cy = y0 as f64 + cell_h as f64 / 2.0 + rng.gen_range(-1.0..=1.0) * (max_ry - ry);
            fill_ellipse(&mut img, cx, cy, rx, ry);
        }
        if rng.gen_bool(0.5) {
            for (dx, dy) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
                img.set_pixel(x0 + dx, y0 + dy, [FIGURE; 3]);
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy)]
struct Walker {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    fx: f64,
    fy: f64,
    phase: f64,
    rx: f64,
    ry: f64,
}

/// Dark figures drifting across a light background, as cast by people
/// walking in front of a backlit screen. Frame `n` depends only on the seed
/// and `n`.
pub struct SyntheticSource {
    width: u32,
    height: u32,
    walkers: Vec<Walker>,
    frame: u64,
}

impl SyntheticSource {
    pub fn new(size: (u32, u32), figures: usize, seed: u64) -> Self {
        let (width, height) = size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let walkers = (0..figures)
            .map(|_| Walker {
                cx: w * rng.gen_range(0.2..0.8),
                cy: h * rng.gen_range(0.45..0.65),
                ax: w * rng.gen_range(0.05..0.3),
                ay: h * rng.gen_range(0.0..0.05),
                fx: rng.gen_range(0.01..0.04),
                fy: rng.gen_range(0.02..0.06),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                rx: w * rng.gen_range(0.04..0.08),
                ry: h * rng.gen_range(0.12..0.22),
            })
            .collect();
        SyntheticSource {
            width,
            height,
            walkers,
            frame: 0,
        }
    }

    pub fn render(&self, n: u64) -> Image {
        let mut img = background(self.width, self.height);
        let t = n as f64;
        for wk in &self.walkers {
            let cx = wk.cx + wk.ax * (std::f64::consts::TAU * wk.fx * t + wk.phase).sin();
            let cy = wk.cy + wk.ay * (std::f64::consts::TAU * wk.fy * t + wk.phase).sin();
            fill_ellipse(&mut img, cx, cy, wk.rx, wk.ry);
            let head = wk.rx * 0.7;
            fill_ellipse(&mut img, cx, cy - wk.ry - head * 0.5, head, head);
        }
        img
    }
}

impl FrameSource for SyntheticSource {
    fn next_frame(&mut self) -> Result<Image, SourceError> {
        let img = self.render(self.frame);
        self.frame += 1;
        Ok(img)
    }

    fn resolution(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

/// Parses `still:<path>`, `dir:<path>` or `synthetic[:<figures>]`.
pub fn open_source(spec: &str, size: (u32, u32), seed: u64) -> Result<Box<dyn FrameSource>, SourceError> {
    if let Some(path) = spec.strip_prefix("still:") {
        return Ok(Box::new(StillSource::open(Path::new(path), size)?));
    }
    if let Some(path) = spec.strip_prefix("dir:") {
        return Ok(Box::new(DirSource::open(Path::new(path), size)?));
    }
    match spec.split_once(':') {
        None if spec == "synthetic" => Ok(Box::new(SyntheticSource::new(size, 2, seed))),
        Some(("synthetic", n)) => {
            let figures = n.parse().map_err(|_| SourceError::Spec(spec.to_owned()))?;
            Ok(Box::new(SyntheticSource::new(size, figures, seed)))
        }
        _ => Err(SourceError::Spec(spec.to_owned())),
    }
}
