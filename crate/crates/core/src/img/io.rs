//! PNG and raw-planar frame files.
//!
//! Raw layout: `RAWIMG\n`, then `<width> <height> <channels>\n`, then the
//! pixel bytes, one row-major plane per channel.

use std::fs;
use std::path::Path;

use image::{DynamicImage, RgbImage};

use super::{to_gray, GrayFrame};
use crate::error::{Error, Result};

const RAW_MAGIC: &[u8] = b"RAWIMG\n";

/// Loads a grayscale frame from a PNG or raw file; RGB inputs go through [`to_gray`].
pub fn load_frame(path: &Path) -> Result<GrayFrame> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(RAW_MAGIC) {
        return read_raw(&bytes);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(g) => GrayFrame::from_u8(g.width() as usize, g.height() as usize, g.as_raw()),
        DynamicImage::ImageRgb8(rgb) => to_gray(&rgb),
        other => to_gray(&other.to_rgb8()),
    }
}

pub fn read_raw(bytes: &[u8]) -> Result<GrayFrame> {
    let rest = bytes
        .strip_prefix(RAW_MAGIC)
        .ok_or_else(|| Error::Image("missing RAWIMG magic".into()))?;
    let eol = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Image("truncated raw header".into()))?;
    let header = std::str::from_utf8(&rest[..eol]).map_err(|_| Error::Image("raw header is not ASCII".into()))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Image(format!("bad raw header `{header}`")))?;
    let [width, height, channels] = fields[..] else {
        return Err(Error::Image(format!(
            "raw header needs width, height and channels, got `{header}`"
        )));
    };
    let plane = width * height;
    let pixels = &rest[eol + 1..];
    if pixels.len() != plane * channels {
        return Err(Error::Image(format!(
            "raw payload has {} bytes, expected {}",
            pixels.len(),
            plane * channels
        )));
    }
    match channels {
        1 => GrayFrame::from_u8(width, height, pixels),
        3 => {
            let mut rgb = RgbImage::new(width as u32, height as u32);
            for (i, px) in rgb.pixels_mut().enumerate() {
                px.0 = [pixels[i], pixels[plane + i], pixels[2 * plane + i]];
            }
            to_gray(&rgb)
        }
        c => Err(Error::Image(format!("unsupported channel count {c}"))),
    }
}

/// Writes a single-channel raw file.
pub fn write_raw(frame: &GrayFrame, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(frame.data().len() + 32);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(format!("{} {} 1\n", frame.width(), frame.height()).as_bytes());
    out.extend_from_slice(&frame.to_u8());
    fs::write(path, out)?;
    Ok(())
}

/// Writes an 8-bit grayscale PNG (intensities are rounded).
pub fn save_png(frame: &GrayFrame, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(frame.width() as u32, frame.height() as u32, frame.to_u8())
        .ok_or_else(|| Error::Image("frame buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_frame() -> GrayFrame {
        GrayFrame::from_fn(9, 5, |x, y| ((x * 29 + y * 53) % 256) as f64).unwrap()
    }

    #[test]
    fn raw_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample_frame();
        let raw = dir.path().join("f.raw");
        write_raw(&f, &raw).unwrap();
        assert_eq!(load_frame(&raw).unwrap(), f);
        let png = dir.path().join("f.png");
        save_png(&f, &png).unwrap();
        assert_eq!(load_frame(&png).unwrap(), f);
    }

    #[test]
    fn raw_rgb_is_planar() {
        let mut bytes = b"RAWIMG\n2 1 3\n".to_vec();
        bytes.extend_from_slice(&[100, 0, 200, 0, 50, 0]);
        let f = read_raw(&bytes).unwrap();
        assert!((f.get(0, 0) - 153.0).abs() < 1e-12);
        assert_eq!(f.get(1, 0), 0.0);
    }

    #[test]
    fn raw_errors() {
        assert!(read_raw(b"NOTRAW\n").is_err());
        assert!(read_raw(b"RAWIMG\n2 2 1\n\x00\x00").is_err());
        assert!(read_raw(b"RAWIMG\n2 2\n\x00\x00\x00\x00").is_err());
        assert!(read_raw(b"RAWIMG\n1 1 2\n\x00\x00").is_err());
    }
}
