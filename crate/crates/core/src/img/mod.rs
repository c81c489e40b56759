//! Grayscale frames, similarity warps, bilinear sampling and patch extraction.

mod io;
mod sample;
mod warp;

pub use io::{load_frame, read_raw, save_png, write_raw};
pub use sample::{sample_bilinear, BilinearTap, Sample};
pub use warp::{compose_warps, invert_warp, normalize_angle, warp_point, WarpParams, MIN_INVERTIBLE_SCALE};

use crate::error::{Error, Result};

/// Single-channel image with real-valued intensities in `[0, 255]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "frame data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=255.0).contains(*v))) {
            return Err(Error::InvalidInput(format!("intensity {v} is outside [0, 255]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds a frame from a generator; values are clamped into `[0, 255]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 255.0));
            }
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64).collect())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sample(&self, x: f64, y: f64) -> Sample {
        sample_bilinear(&self.data, self.width, self.height, x, y)
    }

    /// Rounds to 8-bit, as stored in PNG and raw files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Bilinear resize by `factor` (used for the optional matching prescale).
    pub fn resized(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidInput(format!("resize factor {factor} must be positive")));
        }
        let w = ((self.width as f64) * factor).round().max(1.0) as usize;
        let h = ((self.height as f64) * factor).round().max(1.0) as usize;
        let sx = (self.width as f64 - 1.0) / (w as f64 - 1.0).max(1.0);
        let sy = (self.height as f64 - 1.0) / (h as f64 - 1.0).max(1.0);
        Self::from_fn(w, h, |x, y| self.sample(x as f64 * sx, y as f64 * sy).value)
    }
}

/// Converts 8-bit RGB to luma with ITU-R BT.601 weights.
pub fn to_gray(rgb: &image::RgbImage) -> Result<GrayFrame> {
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("cannot convert an empty image".into()));
    }
    // Integer weights keep white at exactly 255.
    let data = rgb
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            (299 * r as u32 + 587 * g as u32 + 114 * b as u32) as f64 / 1000.0
        })
        .collect();
    GrayFrame::new(w as usize, h as usize, data)
}

/// A fixed-size crop together with the frame location of its center and the
/// per-pixel validity mask (pixels sampled outside the source frame are 0 and invalid).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pixels: GrayFrame,
    center: [f64; 2],
    valid: Vec<bool>,
}

impl Patch {
    /// Wraps a frame as a fully valid patch centered at `(w/2, h/2)`.
    pub fn from_frame(pixels: GrayFrame) -> Self {
        let center = [(pixels.width() / 2) as f64, (pixels.height() / 2) as f64];
        let valid = vec![true; pixels.data().len()];
        Self { pixels, center, valid }
    }

    pub fn pixels(&self) -> &GrayFrame {
        &self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn center(&self) -> [f64; 2] {
        self.center
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Samples a `w × h` patch whose pixel `(i, j)` sits at
/// `center + (i - w/2, j - h/2)` in the frame.
///
/// Integer centers therefore reproduce the underlying pixels exactly.
pub fn crop_patch(frame: &GrayFrame, center: [f64; 2], w: usize, h: usize) -> Result<Patch> {
    if w < 8 || h < 8 {
        return Err(Error::InvalidInput(format!("patch must be at least 8x8, got {w}x{h}")));
    }
    if !(center[0].is_finite() && center[1].is_finite()) {
        return Err(Error::InvalidInput("patch center must be finite".into()));
    }
    let ox = center[0] - (w / 2) as f64;
    let oy = center[1] - (h / 2) as f64;
    let mut data = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    let mut outside = 0;
    for j in 0..h {
        for i in 0..w {
            let s = frame.sample(ox + i as f64, oy + j as f64);
            if !s.valid {
                outside += 1;
            }
            data.push(s.value);
            valid.push(s.valid);
        }
    }
    if outside * 2 > w * h {
        return Err(Error::PatchOutOfFrame { outside, total: w * h });
    }
    Ok(Patch {
        pixels: GrayFrame {
            width: w,
            height: h,
            data,
        },
        center,
        valid,
    })
}
