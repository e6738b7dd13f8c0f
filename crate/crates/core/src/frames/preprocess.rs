use log::warn;

use super::io::Raster;
use super::{Frame, FrameError, RegionMask};

/// Artifact masks at or above this area fraction are not inpainted.
pub const ARTIFACT_AREA_LIMIT: f64 = 0.05;
/// Percentile rescaling needs at least this many region pixels.
pub const MIN_RESCALE_PIXELS: usize = 50;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const INPAINT_TOLERANCE: f64 = 1e-4;
const INPAINT_MAX_SWEEPS: usize = 100_000;

/// Why a preprocessing step returned something other than its normal output.
#[derive(Clone, Debug, PartialEq)]
pub enum PreprocessNote {
    ArtifactAreaTooLarge { fraction: f64 },
    TooFewRegionPixels { count: usize },
    DegenerateRange { value: f64 },
}

pub fn to_grayscale(raster: &Raster) -> Result<Frame, FrameError> {
    if raster.channels != 3 {
        return Err(FrameError::ChannelCount {
            expected: 3,
            got: raster.channels,
        });
    }
    let pixels = raster
        .data
        .chunks_exact(3)
        .map(|px| {
            if px[0] == px[1] && px[1] == px[2] {
                px[0]
            } else {
                LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
            }
        })
        .collect();
    Ok(Frame::clipped(raster.height, raster.width, pixels))
}

/// Marks strongly colored pixels (annotations, overlays) in an RGB raster.
pub fn artifact_mask_from_color(raster: &Raster, chroma_threshold: f64) -> RegionMask {
    let bits = if raster.channels == 3 {
        raster
            .data
            .chunks_exact(3)
            .map(|px| {
                let hi = px.iter().copied().fold(f64::MIN, f64::max);
                let lo = px.iter().copied().fold(f64::MAX, f64::min);
                hi - lo > chroma_threshold
            })
            .collect()
    } else {
        vec![false; raster.height * raster.width]
    };
    RegionMask {
        height: raster.height,
        width: raster.width,
        bits,
    }
}

/// Fills masked pixels by iterated 4-neighbour averaging.
///
/// Unmasked pixels are copied through untouched. Masks covering
/// [`ARTIFACT_AREA_LIMIT`] or more of the frame are left alone.
pub fn inpaint_artifacts(
    frame: &Frame,
    artifacts: &RegionMask,
) -> Result<(Frame, Option<PreprocessNote>), FrameError> {
    if !artifacts.matches(frame) {
        return Err(FrameError::Dimensions("artifact mask vs frame".into()));
    }
    let masked = artifacts.count();
    if masked == 0 {
        return Ok((frame.clone(), None));
    }
    let fraction = masked as f64 / (frame.height * frame.width) as f64;
    if fraction >= ARTIFACT_AREA_LIMIT {
        warn!("artifact area {fraction:.4} exceeds inpainting limit; frame passed through");
        return Ok((frame.clone(), Some(PreprocessNote::ArtifactAreaTooLarge { fraction })));
    }

    let (h, w) = (frame.height, frame.width);
    let known: Vec<f64> = frame
        .pixels
        .iter()
        .zip(&artifacts.bits)
        .filter(|(_, &m)| !m)
        .map(|(&p, _)| p)
        .collect();
    let fill = known.iter().sum::<f64>() / known.len() as f64;
    let holes: Vec<usize> = (0..h * w).filter(|&i| artifacts.bits[i]).collect();
    let mut cur = frame.pixels.clone();
    for &i in &holes {
        cur[i] = fill;
    }
    let mut next = cur.clone();
    for _ in 0..INPAINT_MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for &i in &holes {
            let (y, x) = (i / w, i % w);
            let (mut sum, mut n) = (0.0, 0.0);
            if y > 0 {
                sum += cur[i - w];
                n += 1.0;
            }
            if y + 1 < h {
                sum += cur[i + w];
                n += 1.0;
            }
            if x > 0 {
                sum += cur[i - 1];
                n += 1.0;
            }
            if x + 1 < w {
                sum += cur[i + 1];
                n += 1.0;
            }
            let v = sum / n;
            delta = delta.max((v - cur[i]).abs());
            next[i] = v;
        }
        for &i in &holes {
            cur[i] = next[i];
        }
        if delta < INPAINT_TOLERANCE {
            break;
        }
    }
    Ok((Frame::clipped(h, w, cur), None))
}

/// Linear-interpolated percentile of ascending `sorted` values, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Maps the region's 2nd/98th percentiles to 0/1, clipping, and zeroes the
/// pixels outside the region.
pub fn percentile_rescale(
    frame: &Frame,
    region: &RegionMask,
) -> Result<(Frame, Option<PreprocessNote>), FrameError> {
    if !region.matches(frame) {
        return Err(FrameError::Dimensions("region mask vs frame".into()));
    }
    let count = region.count();
    if count < MIN_RESCALE_PIXELS {
        warn!("region has {count} pixels; rescaling skipped");
        return Ok((frame.clone(), Some(PreprocessNote::TooFewRegionPixels { count })));
    }
    let mut values: Vec<f64> = frame
        .pixels
        .iter()
        .zip(&region.bits)
        .filter(|(_, &r)| r)
        .map(|(&p, _)| p)
        .collect();
    values.sort_by(f64::total_cmp);
    let lo = percentile(&values, 2.0);
    let hi = percentile(&values, 98.0);
    if hi <= lo {
        warn!("degenerate intensity range at {lo}; region zeroed");
        let zeros = Frame::filled(frame.height, frame.width, 0.0);
        return Ok((zeros, Some(PreprocessNote::DegenerateRange { value: lo })));
    }
    let span = hi - lo;
    let pixels = frame
        .pixels
        .iter()
        .zip(&region.bits)
        .map(|(&p, &r)| if r { (p - lo) / span } else { 0.0 })
        .collect();
    Ok((Frame::clipped(frame.height, frame.width, pixels), None))
}

fn source_coord(dst: usize, scale: f64, limit: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(limit - 1);
    let hi = (lo + 1).min(limit - 1);
    (lo, hi, s - lo as f64)
}

/// Half-pixel-centred bilinear resampling.
pub fn resize_bilinear(frame: &Frame, height: usize, width: usize) -> Frame {
    if frame.height == height && frame.width == width {
        return frame.clone();
    }
    let sy = frame.height as f64 / height as f64;
    let sx = frame.width as f64 / width as f64;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = source_coord(y, sy, frame.height);
        for x in 0..width {
            let (x0, x1, fx) = source_coord(x, sx, frame.width);
            let top = frame.get(y0, x0) * (1.0 - fx) + frame.get(y0, x1) * fx;
            let bottom = frame.get(y1, x0) * (1.0 - fx) + frame.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Frame::clipped(height, width, out)
}

pub fn resize_nearest(mask: &RegionMask, height: usize, width: usize) -> RegionMask {
    if mask.height == height && mask.width == width {
        return mask.clone();
    }
    let sy = mask.height as f64 / height as f64;
    let sx = mask.width as f64 / width as f64;
    let mut bits = Vec::with_capacity(height * width);
    for y in 0..height {
        let ys = (((y as f64 + 0.5) * sy) as usize).min(mask.height - 1);
        for x in 0..width {
            let xs = (((x as f64 + 0.5) * sx) as usize).min(mask.width - 1);
            bits.push(mask.get(ys, xs));
        }
    }
    RegionMask {
        height,
        width,
        bits,
    }
}
