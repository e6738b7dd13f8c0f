//! Severity-graded image corruptions: Gaussian blur, contrast depletion toward
//! the region median, and spatially correlated multiplicative speckle.
//!
//! Every function maps a `[0, 1]` frame to a `[0, 1]` frame.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::frames::{Frame, RegionMask};
use crate::rng::rng_for;

pub const SEVERITIES: [u8; 3] = [1, 2, 3];
pub const SPECKLE_SIGMA_PER_LEVEL: f64 = 0.35;

#[derive(Debug, thiserror::Error)]
pub enum CorruptionError {
    #[error("severity {0} outside 1..=3")]
    Severity(u8),
    #[error("region mask is empty")]
    EmptyRegion,
    #[error("region mask is {mask:?} but frame is {frame:?}")]
    Dimensions {
        mask: (usize, usize),
        frame: (usize, usize),
    },
    #[error("unknown corruption kind {0:?}")]
    UnknownKind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Blur,
    Contrast,
    Speckle,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [Self::Blur, Self::Contrast, Self::Speckle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blur => "blur",
            Self::Contrast => "contrast",
            Self::Speckle => "speckle",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blur" => Ok(Self::Blur),
            "contrast" => Ok(Self::Contrast),
            "speckle" => Ok(Self::Speckle),
            other => Err(CorruptionError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Only read by speckle.
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self, CorruptionError> {
        check_severity(severity)?;
        Ok(Self { kind, severity, seed })
    }
}

fn check_severity(eps: u8) -> Result<(), CorruptionError> {
    if SEVERITIES.contains(&eps) {
        Ok(())
    } else {
        Err(CorruptionError::Severity(eps))
    }
}

/// Applies `spec`; the region is only consulted by contrast depletion.
pub fn corrupt(frame: &Frame, region: &RegionMask, spec: &CorruptionSpec) -> Result<Frame, CorruptionError> {
    match spec.kind {
        CorruptionKind::Blur => gaussian_blur(frame, spec.severity),
        CorruptionKind::Contrast => contrast_deplete(frame, region, spec.severity),
        CorruptionKind::Speckle => speckle(frame, spec.severity, spec.seed),
    }
}

/// Side length `2⌊2ε⌋ + 1` of the blur kernel.
pub fn blur_kernel_side(eps: u8) -> usize {
    2 * (2 * eps as usize) + 1
}

/// Normalized 1-D Gaussian taps with `σ = ε`.
pub fn gaussian_kernel_1d(eps: u8) -> Vec<f64> {
    let sigma = eps as f64;
    let r = (blur_kernel_side(eps) / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn convolve_separable(h: usize, w: usize, src: &[f64], taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * src[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn gaussian_blur(frame: &Frame, eps: u8) -> Result<Frame, CorruptionError> {
    check_severity(eps)?;
    let taps = gaussian_kernel_1d(eps);
    let out = convolve_separable(frame.height(), frame.width(), frame.pixels(), &taps);
    Ok(Frame::clipped(frame.height(), frame.width(), out))
}

/// Shrink factor α for severities 1, 2, 3.
pub fn contrast_alpha(eps: u8) -> Result<f64, CorruptionError> {
    match eps {
        1 => Ok(0.7),
        2 => Ok(0.5),
        3 => Ok(0.3),
        other => Err(CorruptionError::Severity(other)),
    }
}

/// Lower median of the region pixels, always an actual pixel value.
pub fn region_median(frame: &Frame, region: &RegionMask) -> Result<f64, CorruptionError> {
    if region.height() != frame.height() || region.width() != frame.width() {
        return Err(CorruptionError::Dimensions {
            mask: (region.height(), region.width()),
            frame: (frame.height(), frame.width()),
        });
    }
    let mut vals: Vec<f64> = frame
        .pixels()
        .iter()
        .zip(region.bits())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return Err(CorruptionError::EmptyRegion);
    }
    let mid = (vals.len() - 1) / 2;
    let (_, m, _) = vals.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*m)
}

pub fn contrast_deplete(frame: &Frame, region: &RegionMask, eps: u8) -> Result<Frame, CorruptionError> {
    let alpha = contrast_alpha(eps)?;
    let mu = region_median(frame, region)?;
    let out = frame
        .pixels()
        .iter()
        .zip(region.bits())
        .map(|(&v, &m)| if m { mu + alpha * (v - mu) } else { v })
        .collect();
    Ok(Frame::clipped(frame.height(), frame.width(), out))
}

/// Side of the box filter that correlates the speckle field.
pub fn speckle_kernel_side(eps: u8) -> usize {
    2 * eps as usize + 1
}

/// Raw i.i.d. noise `η ~ N(0, (0.35ε)²)` and its box-smoothed version.
pub fn speckle_field(height: usize, width: usize, eps: u8, seed: u64) -> Result<(Vec<f64>, Vec<f64>), CorruptionError> {
    check_severity(eps)?;
    let normal = Normal::new(0.0, SPECKLE_SIGMA_PER_LEVEL * eps as f64).expect("positive sigma");
    let mut rng = rng_for(seed, &[0x5BEC]);
    let raw: Vec<f64> = (0..height * width).map(|_| normal.sample(&mut rng)).collect();
    let k = speckle_kernel_side(eps);
    let taps = vec![1.0 / k as f64; k];
    let smooth = convolve_separable(height, width, &raw, &taps);
    Ok((raw, smooth))
}

pub fn speckle(frame: &Frame, eps: u8, seed: u64) -> Result<Frame, CorruptionError> {
    let (_, eta) = speckle_field(frame.height(), frame.width(), eps, seed)?;
    let out = frame.pixels().iter().zip(&eta).map(|(&v, &n)| v * (1.0 + n)).collect();
    Ok(Frame::clipped(frame.height(), frame.width(), out))
}

/// Sum of absolute horizontal and vertical neighbour differences.
pub fn total_variation(frame: &Frame) -> f64 {
    let (h, w) = (frame.height(), frame.width());
    let p = frame.pixels();
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                tv += (p[y * w + x + 1] - p[y * w + x]).abs();
            }
            if y + 1 < h {
                tv += (p[(y + 1) * w + x] - p[y * w + x]).abs();
            }
        }
    }
    tv
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::frames::{synth_frame, SynthConfig};

    fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = rng_for(seed, &[]);
        Frame::clipped(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn blur_kernel_sides() {
        assert_eq!(blur_kernel_side(1), 5);
        assert_eq!(blur_kernel_side(2), 9);
        assert_eq!(blur_kernel_side(3), 13);
        for e in SEVERITIES {
            let k = gaussian_kernel_1d(e);
            assert_eq!(k.len(), blur_kernel_side(e));
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_impulse_is_the_2d_kernel() {
        let n = 21;
        let mut px = vec![0.0; n * n];
        px[10 * n + 10] = 1.0;
        let out = gaussian_blur(&Frame::new(n, n, px).unwrap(), 1).unwrap();
        // independent 2-D evaluation, normalized over the 5x5 support
        let mut k2 = [[0.0f64; 5]; 5];
        let mut total = 0.0;
        for (dy, row) in k2.iter_mut().enumerate() {
            for (dx, v) in row.iter_mut().enumerate() {
                let (a, b) = (dy as f64 - 2.0, dx as f64 - 2.0);
                *v = (-(a * a + b * b) / 2.0).exp();
                total += *v;
            }
        }
        for y in 0..n {
            for x in 0..n {
                let expect = if (8..13).contains(&y) && (8..13).contains(&x) {
                    k2[y - 8][x - 8] / total
                } else {
                    0.0
                };
                assert!((out.get(y, x) - expect).abs() < 1e-15, "({y},{x})");
            }
        }
    }

    #[test]
    fn blur_keeps_constant_frames() {
        let f = Frame::filled(9, 7, 0.37);
        for e in SEVERITIES {
            let out = gaussian_blur(&f, e).unwrap();
            assert!(out.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-14));
        }
        // kernel wider than the frame still reflects cleanly
        let tiny = Frame::filled(2, 3, 0.5);
        assert!(gaussian_blur(&tiny, 3).unwrap().pixels().iter().all(|&v| (v - 0.5).abs() < 1e-14));
    }

    #[test]
    fn blur_total_variation_non_increasing() {
        for seed in 0..5 {
            let frames = [
                random_frame(32, 32, seed),
                synth_frame(seed as usize % 3, seed, &SynthConfig::default()).unwrap().frame,
            ];
            for f in frames {
                let mut prev = total_variation(&f);
                for e in SEVERITIES {
                    let tv = total_variation(&gaussian_blur(&f, e).unwrap());
                    assert!(tv <= prev + 1e-9, "seed {seed} eps {e}: {tv} > {prev}");
                    prev = tv;
                }
            }
        }
    }

    #[test]
    fn contrast_worked_example() {
        // median pixel 100/255, probe pixel 200/255
        let px = vec![100.0 / 255.0, 100.0 / 255.0, 200.0 / 255.0, 50.0 / 255.0, 120.0 / 255.0];
        let f = Frame::new(1, 5, px).unwrap();
        let region = RegionMask::full(1, 5);
        assert_eq!(region_median(&f, &region).unwrap(), 100.0 / 255.0);
        let out = contrast_deplete(&f, &region, 3).unwrap();
        assert_eq!(out.get(0, 2), 130.0 / 255.0);
        assert_eq!(region_median(&out, &region).unwrap(), 100.0 / 255.0);
    }

    #[test]
    fn contrast_alphas_and_fixed_point() {
        assert_eq!(contrast_alpha(1).unwrap(), 0.7);
        assert_eq!(contrast_alpha(2).unwrap(), 0.5);
        assert_eq!(contrast_alpha(3).unwrap(), 0.3);
        let f = Frame::filled(4, 4, 0.25);
        let r = RegionMask::full(4, 4);
        for e in SEVERITIES {
            assert_eq!(contrast_deplete(&f, &r, e).unwrap(), f);
        }
        assert!(matches!(
            contrast_deplete(&f, &RegionMask::empty(4, 4), 1),
            Err(CorruptionError::EmptyRegion)
        ));
    }

    #[test]
    fn contrast_leaves_outside_region_alone_and_shrinks_range() {
        let s = synth_frame(1, 3, &SynthConfig::default()).unwrap();
        let range = |f: &Frame| {
            let vals: Vec<f64> = f.pixels().iter().zip(s.region.bits()).filter(|p| *p.1).map(|p| *p.0).collect();
            vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min)
        };
        let mut prev = range(&s.frame);
        let median = region_median(&s.frame, &s.region).unwrap();
        for e in SEVERITIES {
            let out = contrast_deplete(&s.frame, &s.region, e).unwrap();
            for (i, &m) in s.region.bits().iter().enumerate() {
                if !m {
                    assert_eq!(out.pixels()[i], s.frame.pixels()[i]);
                }
            }
            assert_eq!(region_median(&out, &s.region).unwrap(), median);
            let r = range(&out);
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn speckle_zero_and_determinism() {
        let zeros = Frame::filled(8, 8, 0.0);
        assert_eq!(speckle(&zeros, 3, 1).unwrap(), zeros);
        let f = random_frame(16, 16, 2);
        assert_eq!(speckle(&f, 2, 5).unwrap(), speckle(&f, 2, 5).unwrap());
        assert_ne!(speckle(&f, 2, 5).unwrap(), speckle(&f, 2, 6).unwrap());
        assert!(speckle(&f, 4, 5).is_err());
    }

    #[test]
    fn speckle_mean_on_constant_frame() {
        let f = Frame::filled(4, 4, 0.5);
        let trials = 10_000;
        let mut sum = 0.0;
        for t in 0..trials {
            sum += speckle(&f, 1, t).unwrap().get(2, 2);
        }
        let mean = sum / trials as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    fn lag1(v: &[f64], h: usize, w: usize) -> f64 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let mut cov = 0.0;
        let mut n = 0;
        for y in 0..h {
            for x in 0..w - 1 {
                cov += (v[y * w + x] - mean) * (v[y * w + x + 1] - mean);
                n += 1;
            }
        }
        cov / n as f64 / var
    }

    #[test]
    fn speckle_autocorrelation_grows_with_severity() {
        let (h, w) = (32, 32);
        let mut raw_ac = [0.0; 3];
        let mut smooth_ac = [0.0; 3];
        let draws = 100;
        for (i, e) in SEVERITIES.into_iter().enumerate() {
            for d in 0..draws {
                let (raw, smooth) = speckle_field(h, w, e, d).unwrap();
                raw_ac[i] += lag1(&raw, h, w) / draws as f64;
                smooth_ac[i] += lag1(&smooth, h, w) / draws as f64;
            }
            assert!(smooth_ac[i] > raw_ac[i] + 0.3);
        }
        assert!(smooth_ac[0] < smooth_ac[1] && smooth_ac[1] < smooth_ac[2], "{smooth_ac:?}");
    }

    #[test]
    fn speckle_variance_follows_kernel_energy() {
        let (h, w) = (64, 64);
        for e in SEVERITIES {
            let k = speckle_kernel_side(e);
            let expect = (SPECKLE_SIGMA_PER_LEVEL * e as f64).powi(2) / (k * k) as f64;
            let mut acc = 0.0;
            let mut n = 0;
            for d in 0..20 {
                let (_, s) = speckle_field(h, w, e, d).unwrap();
                for y in k..h - k {
                    for x in k..w - k {
                        acc += s[y * w + x].powi(2);
                        n += 1;
                    }
                }
            }
            let var = acc / n as f64;
            assert!((var / expect - 1.0).abs() < 0.1, "eps {e}: {var} vs {expect}");
        }
    }

    proptest! {
        #[test]
        fn corruptions_stay_in_unit_range(seed in 0u64..1000, h in 1usize..20, w in 1usize..20, eps in 1u8..=3) {
            let f = random_frame(h, w, seed);
            let r = RegionMask::full(h, w);
            for kind in CorruptionKind::ALL {
                let out = corrupt(&f, &r, &CorruptionSpec::new(kind, eps, seed).unwrap()).unwrap();
                prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
