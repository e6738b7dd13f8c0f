//! Seeded stand-in for real ultrasound frames.
//!
//! A frame is a sector ("fan") of speckled tissue on a black background with
//! one inclusion whose echo pattern depends on the class. Everything except
//! that pattern is drawn from the seed alone, so two classes rendered with the
//! same seed differ only inside the inclusion footprint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Frame, FrameError, RegionMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Standard deviation of the multiplicative speckle field.
    pub speckle: f64,
    /// Inclusion radius range as a fraction of the shorter frame side.
    pub inclusion_radius: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 3,
            speckle: 0.3,
            inclusion_radius: (0.10, 0.14),
        }
    }
}

/// Echo pattern of the embedded lesion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InclusionKind {
    /// Uniformly dark.
    Hypoechoic,
    /// Uniformly bright.
    Hyperechoic,
    /// Dark core with a bright rim.
    Ring,
    /// Bright core with a dark rim.
    Target,
    /// Bright horizontal band across a dark body.
    Banded,
}

impl InclusionKind {
    pub const ALL: [InclusionKind; 5] = [
        InclusionKind::Hypoechoic,
        InclusionKind::Hyperechoic,
        InclusionKind::Ring,
        InclusionKind::Target,
        InclusionKind::Banded,
    ];

    pub fn for_class(class: usize) -> Self {
        Self::ALL[class % Self::ALL.len()]
    }

    /// Intensity multiplier at normalised offset `(dy, dx)`, `dy² + dx² ≤ 1`.
    fn gain(self, dy: f64, dx: f64) -> f64 {
        const DARK: f64 = 0.3;
        const BRIGHT: f64 = 1.9;
        let d = (dy * dy + dx * dx).sqrt();
        match self {
            InclusionKind::Hypoechoic => DARK,
            InclusionKind::Hyperechoic => BRIGHT,
            InclusionKind::Ring => {
                if d > 0.55 {
                    BRIGHT
                } else {
                    DARK
                }
            }
            InclusionKind::Target => {
                if d > 0.55 {
                    DARK
                } else {
                    BRIGHT
                }
            }
            InclusionKind::Banded => {
                if dy.abs() < 0.3 {
                    BRIGHT
                } else {
                    DARK
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub frame: Frame,
    pub region: RegionMask,
    pub label: usize,
    /// Pixels whose value depends on the class.
    pub inclusion: RegionMask,
}

pub fn synth_frame(class_id: usize, seed: u64, cfg: &SynthConfig) -> Result<SynthSample, FrameError> {
    if class_id >= cfg.classes || cfg.classes > InclusionKind::ALL.len() {
        return Err(FrameError::InvalidClass {
            class: class_id,
            classes: cfg.classes,
        });
    }
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let apex_x = wf * (0.5 + rng.random_range(-0.05..0.05));
    let apex_y = hf * rng.random_range(-0.12..-0.02);
    let half_angle = rng.random_range(32.0f64..42.0).to_radians();
    let r_near = hf * rng.random_range(0.10..0.18);
    let r_far = hf * rng.random_range(0.88..1.0);
    let base = rng.random_range(0.35..0.5);
    let band_r = r_near + (r_far - r_near) * rng.random_range(0.1..0.9);
    let band_gain = rng.random_range(0.1..0.25);

    let depth = r_near + (r_far - r_near) * rng.random_range(0.35..0.7);
    let lateral = half_angle * rng.random_range(-0.45..0.45);
    let inc_x = apex_x + depth * lateral.sin();
    let inc_y = apex_y + depth * lateral.cos();
    let inc_r = hf.min(wf) * rng.random_range(cfg.inclusion_radius.0..cfg.inclusion_radius.1);

    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let speckle = box3(&noise, h, w);
    let kind = InclusionKind::for_class(class_id);

    let mut pixels = vec![0.0; h * w];
    let mut region = RegionMask::empty(h, w);
    let mut inclusion = RegionMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (vx, vy) = (px - apex_x, py - apex_y);
            let r = (vx * vx + vy * vy).sqrt();
            let angle = vx.atan2(vy);
            if r < r_near || r > r_far || angle.abs() > half_angle {
                continue;
            }
            let i = y * w + x;
            region.set(y, x, true);
            let along = (r - r_near) / (r_far - r_near);
            let mut tissue = base * (1.0 - 0.35 * along);
            if (r - band_r).abs() < 1.5 {
                tissue += band_gain;
            }
            let (dy, dx) = ((py - inc_y) / inc_r, (px - inc_x) / inc_r);
            if dy * dy + dx * dx <= 1.0 {
                inclusion.set(y, x, true);
                tissue *= kind.gain(dy, dx);
            }
            let factor = (1.0 + cfg.speckle * 3.0 * speckle[i]).max(0.0);
            pixels[i] = (tissue * factor).clamp(0.03, 1.0);
        }
    }
    Ok(SynthSample {
        frame: Frame::clipped(h, w, pixels),
        region,
        label: class_id,
        inclusion,
    })
}

/// 3x3 box mean with edge clamping; unit-variance input gives std 1/3.
fn box3(values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    s += values[yy * w + xx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}
