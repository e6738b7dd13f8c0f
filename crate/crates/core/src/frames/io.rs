use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::{Frame, FrameError, RegionMask};

/// Decoded raster with interleaved channels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    /// Grayscale rasters pass through; RGB rasters go through luma conversion.
    pub fn into_frame(self) -> Result<Frame, FrameError> {
        match self.channels {
            1 => Ok(Frame::clipped(self.height, self.width, self.data)),
            _ => super::to_grayscale(&self),
        }
    }
}

/// Reads an 8-bit grayscale or RGB raster; alpha is dropped.
pub fn read_raster(path: &Path) -> Result<Raster, FrameError> {
    let img = image::open(path).map_err(|e| FrameError::Raster(format!("{}: {e}", path.display())))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    Ok(Raster {
        height,
        width,
        channels,
        data: bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

pub fn write_frame_png(frame: &Frame, path: &Path) -> Result<(), FrameError> {
    let bytes = frame.pixels().iter().map(|&p| (p * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(frame.width() as u32, frame.height() as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| FrameError::Raster(format!("{}: {e}", path.display())))
}

pub fn write_rgb_png(height: usize, width: usize, rgb: Vec<u8>, path: &Path) -> Result<(), FrameError> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| FrameError::Dimensions("rgb buffer size".into()))?;
    img.save(path)
        .map_err(|e| FrameError::Raster(format!("{}: {e}", path.display())))
}

/// Writes a binary PBM (`P4`), one bit per pixel, rows padded to bytes.
pub fn write_mask_pbm(mask: &RegionMask, path: &Path) -> Result<(), FrameError> {
    let mut out = format!("P4\n{} {}\n", mask.width(), mask.height()).into_bytes();
    for y in 0..mask.height() {
        let mut byte = 0u8;
        for x in 0..mask.width() {
            if mask.get(y, x) {
                byte |= 0x80 >> (x % 8);
            }
            if x % 8 == 7 || x + 1 == mask.width() {
                out.push(byte);
                byte = 0;
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_mask_pbm(path: &Path) -> Result<RegionMask, FrameError> {
    let bytes = std::fs::read(path)?;
    let bad = || FrameError::Raster(format!("{}: malformed PBM", path.display()));
    // Header: magic, width, height, each followed by whitespace.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P4" {
        return Err(bad());
    }
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    let stride = width.div_ceil(8);
    let body = bytes.get(pos..pos + stride * height).ok_or_else(bad)?;
    let mut bits = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            bits.push(body[y * stride + x / 8] & (0x80 >> (x % 8)) != 0);
        }
    }
    RegionMask::new(height, width, bits)
}
