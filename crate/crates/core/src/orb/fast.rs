//! FAST-9-16 segment test with score-based non-maximum suppression.

use crate::error::{invalid, Result};
use crate::image::GrayImage;

/// Radius-3 Bresenham circle, clockwise from 12 o'clock.
pub const RING: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

pub const ARC: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub score: f32,
}

/// Segment-test score at an interior pixel, `None` when it is not a corner.
pub fn segment_score(img: &GrayImage, x: usize, y: usize, threshold: f32) -> Option<f32> {
    let (xi, yi) = (x as isize, y as isize);
    let c = img.at(x, y);
    let hi = c + threshold;
    let lo = c - threshold;
    let px = |k: usize| img.at_i(xi + RING[k].0, yi + RING[k].1);

    // Any 9-arc covers at least two of the four compass points.
    let compass = [px(0), px(4), px(8), px(12)];
    let nb = compass.iter().filter(|&&v| v > hi).count();
    let nd = compass.iter().filter(|&&v| v < lo).count();
    if nb < 2 && nd < 2 {
        return None;
    }

    let mut diff = [0f32; 16];
    let (mut bright, mut dark) = (0u32, 0u32);
    for (k, d) in diff.iter_mut().enumerate() {
        let v = px(k);
        *d = (v - c).abs();
        if v > hi {
            bright |= 1 << k;
        } else if v < lo {
            dark |= 1 << k;
        }
    }
    let mut best: Option<f32> = None;
    for mask in [bright, dark] {
        let starts = arc_starts(mask);
        if starts == 0 {
            continue;
        }
        for s in 0..16 {
            if starts & (1 << s) == 0 {
                continue;
            }
            let m = (0..ARC).map(|j| diff[(s + j) % 16]).fold(f32::INFINITY, f32::min);
            best = Some(best.map_or(m, |b: f32| b.max(m)));
        }
    }
    best
}

/// Bit `s` set iff ring positions `s..s+9` (cyclic) are all set in `mask`.
fn arc_starts(mask: u32) -> u32 {
    let wrapped = mask | (mask << 16);
    let mut run = wrapped;
    for j in 1..ARC {
        run &= wrapped >> j;
    }
    run & 0xffff
}

/// Corners in raster order. Pixels within 3 px of the border never fire.
pub fn fast_detect(img: &GrayImage, threshold: f32, nms_radius: usize) -> Result<Vec<Corner>> {
    if img.width < 7 || img.height < 7 {
        return invalid(format!("FAST needs at least 7x7, got {}x{}", img.width, img.height));
    }
    if !(threshold > 0.0) {
        return invalid(format!("FAST threshold must be positive, got {threshold}"));
    }
    let (w, h) = (img.width, img.height);
    let mut score = vec![0f32; w * h];
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            if let Some(s) = segment_score(img, x, y, threshold) {
                score[y * w + x] = s;
            }
        }
    }
    Ok(suppress(&score, w, h, nms_radius))
}

/// Keeps a corner when no other corner in its window scores higher; equal
/// scores go to the earlier pixel in raster order.
fn suppress(score: &[f32], w: usize, h: usize, r: usize) -> Vec<Corner> {
    let mut out = Vec::new();
    for y in 0..h {
        'px: for x in 0..w {
            let s = score[y * w + x];
            if s <= 0.0 {
                continue;
            }
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            for qy in y0..=y1 {
                for qx in x0..=x1 {
                    let q = score[qy * w + qx];
                    if (qy, qx) == (y, x) || q <= 0.0 {
                        continue;
                    }
                    if q > s || (q == s && (qy, qx) < (y, x)) {
                        continue 'px;
                    }
                }
            }
            out.push(Corner { x, y, score: s });
        }
    }
    out
}
