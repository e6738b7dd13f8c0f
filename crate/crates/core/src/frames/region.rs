use std::collections::VecDeque;

use super::{Frame, FrameError, RegionMask};

/// Intensity above which a (median-filtered) pixel counts as signal.
pub const REGION_THRESHOLD: f64 = 5.0 / 255.0;
const CLOSE_RADIUS: isize = 5;

/// Extracts the ultrasound content region of a grayscale frame.
///
/// Pipeline: 3x3 median filter, threshold at [`REGION_THRESHOLD`], disk
/// closing of radius 5, largest 8-connected component, hole filling. Finally
/// raw above-threshold pixels touching the result are re-attached, which
/// restores the corners the median filter shaves off.
pub fn extract_region_mask(frame: &Frame) -> Result<RegionMask, FrameError> {
    let (h, w) = (frame.height(), frame.width());
    let raw: Vec<bool> = frame.pixels().iter().map(|&p| p > REGION_THRESHOLD).collect();
    let smoothed = median3(frame);
    let thresholded: Vec<bool> = smoothed.iter().map(|&p| p > REGION_THRESHOLD).collect();
    let closed = close(&thresholded, h, w, CLOSE_RADIUS);
    let largest = largest_component(&closed, h, w);
    let filled = fill_holes(&largest, h, w);

    let square = disk_offsets(1)
        .into_iter()
        .chain([(-1, -1), (-1, 1), (1, -1), (1, 1)])
        .collect::<Vec<_>>();
    let grown = dilate(&filled, h, w, &square);
    let bits: Vec<bool> = (0..h * w).map(|i| filled[i] || (grown[i] && raw[i])).collect();
    let mask = RegionMask::new(h, w, bits)?;
    if mask.is_empty() {
        return Err(FrameError::EmptyRegion);
    }
    Ok(mask)
}

fn median3(frame: &Frame) -> Vec<f64> {
    let (h, w) = (frame.height() as isize, frame.width() as isize);
    let mut out = Vec::with_capacity((h * w) as usize);
    let mut window = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w {
                        window.push(frame.get(yy as usize, xx as usize));
                    }
                }
            }
            window.sort_by(f64::total_cmp);
            out.push(window[window.len() / 2]);
        }
    }
    out
}

fn disk_offsets(radius: isize) -> Vec<(isize, isize)> {
    let mut v = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dy * dy + dx * dx <= radius * radius {
                v.push((dy, dx));
            }
        }
    }
    v
}

/// Morphological closing on a canvas padded with background, so shapes
/// touching the image border are neither grown nor eroded there.
fn close(bits: &[bool], h: usize, w: usize, radius: isize) -> Vec<bool> {
    let r = radius as usize;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut padded = vec![false; ph * pw];
    for y in 0..h {
        padded[(y + r) * pw + r..(y + r) * pw + r + w].copy_from_slice(&bits[y * w..(y + 1) * w]);
    }
    let offsets = disk_offsets(radius);
    let grown = morph(&padded, ph, pw, &offsets, true);
    let closed = morph(&grown, ph, pw, &offsets, false);
    (0..h)
        .flat_map(|y| closed[(y + r) * pw + r..(y + r) * pw + r + w].to_vec())
        .collect()
}

/// Max over in-bounds neighbours.
fn dilate(bits: &[bool], h: usize, w: usize, offsets: &[(isize, isize)]) -> Vec<bool> {
    morph(bits, h, w, offsets, true)
}

/// Dilation (`any`) or erosion; out-of-bounds neighbours count as background.
fn morph(bits: &[bool], h: usize, w: usize, offsets: &[(isize, isize)], any: bool) -> Vec<bool> {
    let (hi, wi) = (h as isize, w as isize);
    let mut out = vec![false; h * w];
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = !any;
            for &(dy, dx) in offsets {
                let (yy, xx) = (y + dy, x + dx);
                let b = yy >= 0 && yy < hi && xx >= 0 && xx < wi && bits[(yy * wi + xx) as usize];
                if any && b {
                    acc = true;
                    break;
                }
                if !any && !b {
                    acc = false;
                    break;
                }
            }
            out[(y * wi + x) as usize] = acc;
        }
    }
    out
}

fn largest_component(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0u32; h * w];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if bits[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// Sets every background pixel not 4-connected to the image border.
fn fill_holes(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !bits[y * w + x] {
                outside[y * w + x] = true;
                queue.push_back(y * w + x);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !bits[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    outside.iter().map(|&o| !o).collect()
}
