//! Patch grids and region-conditioned context/target block sampling.
//!
//! Targets are drawn first. Each candidate block is intersected with the
//! valid patch set and accepted once it keeps at least `tau` patches; after
//! `max_attempts` rejections the best candidate seen is used instead and the
//! fallback is counted. The context block is then intersected with the valid
//! set and stripped of every target patch.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::frames::{Frame, RegionMask};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskingError {
    #[error("patch size {patch} does not tile a {height}x{width} frame")]
    Tiling { height: usize, width: usize, patch: usize },
    #[error("region mask is {got:?}, grid expects {expected:?}")]
    Dimensions { expected: (usize, usize), got: (usize, usize) },
    #[error("no patch intersects the region")]
    EmptyValid,
    #[error("no block satisfies scale {scale:?} and aspect {aspect:?}")]
    Unsatisfiable { scale: (f64, f64), aspect: (f64, f64) },
    #[error("{valid} valid patches, fewer than tau = {tau}")]
    InsufficientValid { valid: usize, tau: usize },
    #[error("every {what} candidate missed the valid region")]
    Rejected { what: &'static str },
}

/// Non-overlapping square patches over a frame, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self, MaskingError> {
        if patch_size == 0 || height == 0 || width == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(MaskingError::Tiling {
                height,
                width,
                patch: patch_size,
            });
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Pixels of patch `index`, row-major, `patch_size²` values.
    pub fn patch_pixels(&self, frame: &Frame, index: usize) -> Vec<f64> {
        let (r, c) = self.position(index);
        let p = self.patch_size;
        let mut out = Vec::with_capacity(p * p);
        for y in r * p..(r + 1) * p {
            out.extend_from_slice(&frame.pixels()[y * frame.width() + c * p..y * frame.width() + (c + 1) * p]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConstraints {
    /// Block area as a fraction of the grid area.
    pub scale_range: (f64, f64),
    /// Width over height.
    pub aspect_range: (f64, f64),
    pub count: usize,
    /// Minimum number of valid patches a block must keep.
    pub tau: usize,
}

impl BlockConstraints {
    pub fn validate(&self) -> Result<(), String> {
        let (s0, s1) = self.scale_range;
        let (a0, a1) = self.aspect_range;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return Err(format!("scale range {:?} must satisfy 0 < min <= max <= 1", self.scale_range));
        }
        if !(0.0 < a0 && a0 <= a1) {
            return Err(format!("aspect range {:?} must satisfy 0 < min <= max", self.aspect_range));
        }
        if self.tau < 1 {
            return Err("tau must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub context: BlockConstraints,
    pub target: BlockConstraints,
    pub max_attempts: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            context: BlockConstraints {
                scale_range: (0.85, 1.0),
                aspect_range: (0.75, 1.5),
                count: 1,
                tau: 10,
            },
            target: BlockConstraints {
                scale_range: (0.075, 0.125),
                aspect_range: (0.75, 1.5),
                count: 4,
                tau: 10,
            },
            max_attempts: 20,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.context.validate()?;
        self.target.validate()?;
        if self.context.count != 1 {
            return Err("exactly one context block is supported".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be positive".into());
        }
        Ok(())
    }
}

/// Sampled context and target patch sets for one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub context: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub valid: Vec<usize>,
    /// Blocks that went through the best-effort fallback.
    pub fallbacks: usize,
}

/// Patches whose pixel footprint contains at least one region pixel.
pub fn valid_patches(region: &RegionMask, grid: &PatchGrid) -> Result<Vec<usize>, MaskingError> {
    if (region.height(), region.width()) != (grid.height, grid.width) {
        return Err(MaskingError::Dimensions {
            expected: (grid.height, grid.width),
            got: (region.height(), region.width()),
        });
    }
    let p = grid.patch_size;
    let mut hit = vec![false; grid.len()];
    for y in 0..grid.height {
        for x in 0..grid.width {
            if region.get(y, x) {
                hit[(y / p) * grid.cols + x / p] = true;
            }
        }
    }
    let valid: Vec<usize> = (0..grid.len()).filter(|&i| hit[i]).collect();
    if valid.is_empty() {
        return Err(MaskingError::EmptyValid);
    }
    Ok(valid)
}

/// Axis-aligned rectangle of patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn indices(&self, grid: &PatchGrid) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.height * self.width);
        for r in self.top..self.top + self.height {
            for c in self.left..self.left + self.width {
                v.push(grid.index(r, c));
            }
        }
        v
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

const RANGE_EPS: f64 = 1e-9;

/// Integer block dimensions meeting both constraints on `grid`.
pub fn feasible_dims(grid: &PatchGrid, scale: (f64, f64), aspect: (f64, f64)) -> Vec<(usize, usize)> {
    let total = grid.len() as f64;
    let mut dims = Vec::new();
    for h in 1..=grid.rows {
        for w in 1..=grid.cols {
            let s = (h * w) as f64 / total;
            let a = w as f64 / h as f64;
            if s >= scale.0 - RANGE_EPS && s <= scale.1 + RANGE_EPS && a >= aspect.0 - RANGE_EPS && a <= aspect.1 + RANGE_EPS {
                dims.push((h, w));
            }
        }
    }
    dims
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Draws a block whose area fraction and aspect lie in the given ranges,
/// placed uniformly on the grid.
///
/// Scale and aspect are drawn uniformly; height is rounded from
/// `sqrt(area / aspect)` and width from `area / height`. If rounding leaves the
/// constraints, the closest feasible integer shape is used.
pub fn sample_block(
    grid: &PatchGrid,
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Block, MaskingError> {
    let feasible = feasible_dims(grid, scale, aspect);
    if feasible.is_empty() {
        return Err(MaskingError::Unsatisfiable { scale, aspect });
    }
    let area = uniform(rng, scale) * grid.len() as f64;
    let ratio = uniform(rng, aspect);
    let h_real = (area / ratio).sqrt();
    let w_real = area / h_real;
    let h = (h_real.round() as usize).clamp(1, grid.rows);
    let w = ((area / h as f64).round() as usize).clamp(1, grid.cols);
    let (height, width) = if feasible.contains(&(h, w)) {
        (h, w)
    } else {
        let dist = |&(fh, fw): &(usize, usize)| (fh as f64 - h_real).abs() + (fw as f64 - w_real).abs();
        *feasible
            .iter()
            .min_by(|a, b| dist(a).total_cmp(&dist(b)))
            .expect("non-empty")
    };
    let top = rng.random_range(0..=grid.rows - height);
    let left = rng.random_range(0..=grid.cols - width);
    Ok(Block {
        top,
        left,
        height,
        width,
    })
}

fn membership(grid: &PatchGrid, set: &[usize]) -> Vec<bool> {
    let mut m = vec![false; grid.len()];
    for &i in set {
        m[i] = true;
    }
    m
}

/// Rejection loop shared by targets and context. Returns the kept patches and
/// whether the fallback path was taken.
fn draw_constrained(
    grid: &PatchGrid,
    constraints: &BlockConstraints,
    max_attempts: usize,
    keep: impl Fn(usize) -> bool,
    what: &'static str,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, bool), MaskingError> {
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..max_attempts {
        let block = sample_block(grid, constraints.scale_range, constraints.aspect_range, rng)?;
        let kept: Vec<usize> = block.indices(grid).into_iter().filter(|&i| keep(i)).collect();
        if kept.len() >= constraints.tau {
            return Ok((kept, false));
        }
        if kept.len() > best.len() {
            best = kept;
        }
    }
    if best.is_empty() {
        return Err(MaskingError::Rejected { what });
    }
    debug!("{what} block fell back to {} patches (tau {})", best.len(), constraints.tau);
    Ok((best, true))
}

/// Draws `constraints.count` target masks `B_i ∩ valid`.
pub fn sample_targets(
    grid: &PatchGrid,
    valid: &[usize],
    constraints: &BlockConstraints,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<usize>>, usize), MaskingError> {
    if valid.len() < constraints.tau {
        return Err(MaskingError::InsufficientValid {
            valid: valid.len(),
            tau: constraints.tau,
        });
    }
    let inside = membership(grid, valid);
    let mut targets = Vec::with_capacity(constraints.count);
    let mut fallbacks = 0;
    for _ in 0..constraints.count {
        let (mask, fell_back) = draw_constrained(grid, constraints, max_attempts, |i| inside[i], "target", rng)?;
        fallbacks += fell_back as usize;
        targets.push(mask);
    }
    Ok((targets, fallbacks))
}

/// Draws the context mask `(B_c ∩ valid) \ ∪ targets`.
pub fn sample_context(
    grid: &PatchGrid,
    valid: &[usize],
    targets: &[Vec<usize>],
    constraints: &BlockConstraints,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, bool), MaskingError> {
    if valid.len() < constraints.tau {
        return Err(MaskingError::InsufficientValid {
            valid: valid.len(),
            tau: constraints.tau,
        });
    }
    let inside = membership(grid, valid);
    let taken = membership(grid, &targets.concat());
    draw_constrained(grid, constraints, max_attempts, |i| inside[i] && !taken[i], "context", rng)
}

/// Full context/target draw. `region = None` samples over the whole grid.
pub fn sample_mask_set(
    grid: &PatchGrid,
    region: Option<&RegionMask>,
    cfg: &MaskingConfig,
    rng: &mut impl Rng,
) -> Result<MaskSet, MaskingError> {
    let valid = match region {
        Some(r) => valid_patches(r, grid)?,
        None => grid.all(),
    };
    let (targets, target_fallbacks) = sample_targets(grid, &valid, &cfg.target, cfg.max_attempts, rng)?;
    let (context, context_fallback) = sample_context(grid, &valid, &targets, &cfg.context, cfg.max_attempts, rng)?;
    Ok(MaskSet {
        context,
        targets,
        valid,
        fallbacks: target_fallbacks + context_fallback as usize,
    })
}

/// RGB overlay: context patches tinted blue, target patches red, patches
/// outside the valid set dimmed.
pub fn render_overlay(frame: &Frame, grid: &PatchGrid, masks: &MaskSet) -> Vec<u8> {
    let valid = membership(grid, &masks.valid);
    let context = membership(grid, &masks.context);
    let target = membership(grid, &masks.targets.concat());
    let mut rgb = Vec::with_capacity(frame.height() * frame.width() * 3);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let v = frame.get(y, x);
            let patch = grid.index(y / grid.patch_size, x / grid.patch_size);
            let [r, g, b] = if target[patch] {
                [0.5 + 0.5 * v, 0.3 * v, 0.3 * v]
            } else if context[patch] {
                [0.4 * v, 0.4 * v, 0.5 + 0.5 * v]
            } else if valid[patch] {
                [v, v, v]
            } else {
                [0.3 * v, 0.3 * v, 0.3 * v]
            };
            rgb.extend([r, g, b].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    rgb
}
