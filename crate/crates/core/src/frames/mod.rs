//! Grayscale frames, ultrasound region masks, preprocessing and the synthetic
//! frame generator.

mod io;
mod preprocess;
mod region;
mod synth;

pub use io::{read_mask_pbm, read_raster, write_frame_png, write_mask_pbm, write_rgb_png, Raster};
pub use preprocess::{
    artifact_mask_from_color, inpaint_artifacts, percentile, percentile_rescale, resize_bilinear,
    resize_nearest, to_grayscale, PreprocessNote, ARTIFACT_AREA_LIMIT, MIN_RESCALE_PIXELS,
};
pub use region::{extract_region_mask, REGION_THRESHOLD};
pub use synth::{synth_frame, InclusionKind, SynthConfig, SynthSample};

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("class {class} outside 0..{classes}")]
    InvalidClass { class: usize, classes: usize },
    #[error("region mask is empty")]
    EmptyRegion,
    #[error("raster: {0}")]
    Raster(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, FrameError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(FrameError::Dimensions(format!(
                "{height}x{width} frame with {} pixels",
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(FrameError::OutOfRange(bad));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds a frame, clipping every value into `[0, 1]`.
    pub fn clipped(height: usize, width: usize, mut pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count");
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::clipped(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
    }
}

/// Binary map marking pixels that carry ultrasound signal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, FrameError> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(FrameError::Dimensions(format!(
                "{height}x{width} mask with {} bits",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn matches(&self, frame: &Frame) -> bool {
        self.height == frame.height && self.width == frame.width
    }

    pub fn iou(&self, other: &RegionMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}
