//! Harris corner response and intensity-centroid orientation.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use std::f64::consts::TAU;

pub const HARRIS_K: f64 = 0.04;
pub const HARRIS_BLOCK: usize = 3;
pub const CENTROID_RADIUS: usize = 15;

/// Sobel gradient at an interior pixel, normalized to intensity per pixel.
#[inline]
fn sobel(img: &GrayImage, x: usize, y: usize) -> (f64, f64) {
    let p = |dx: isize, dy: isize| img.at_i(x as isize + dx, y as isize + dy) as f64;
    let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
    let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
    (gx / 8.0, gy / 8.0)
}

/// `det(M) - k trace(M)^2` over a `(2 block + 1)^2` window of Sobel products.
pub fn harris_score(img: &GrayImage, x: usize, y: usize, block: usize) -> Result<f64> {
    let reach = block + 1;
    if x < reach || y < reach || x + reach >= img.width || y + reach >= img.height {
        return Err(Error::OutOfBounds(format!(
            "Harris window {block} at ({x}, {y}) exceeds {}x{}",
            img.width, img.height
        )));
    }
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for py in y - block..=y + block {
        for px in x - block..=x + block {
            let (gx, gy) = sobel(img, px, py);
            a += gx * gx;
            b += gx * gy;
            c += gy * gy;
        }
    }
    Ok(a * c - b * b - HARRIS_K * (a + c) * (a + c))
}

/// Half-widths of the circular patch rows: `umax[v] = floor(sqrt(r^2 - v^2))`.
pub(crate) fn circle_extent(radius: usize) -> Vec<usize> {
    let r2 = (radius * radius) as f64;
    (0..=radius).map(|v| (r2 - (v * v) as f64).sqrt().floor() as usize).collect()
}

/// Patch orientation `atan2(m01, m10)` in `[0, 2pi)`. The flag reports a
/// degenerate patch whose first moments both vanish.
pub fn intensity_centroid_angle(img: &GrayImage, x: usize, y: usize, radius: usize) -> Result<(f64, bool)> {
    if x < radius || y < radius || x + radius >= img.width || y + radius >= img.height {
        return Err(Error::OutOfBounds(format!(
            "centroid patch radius {radius} at ({x}, {y}) exceeds {}x{}",
            img.width, img.height
        )));
    }
    let umax = circle_extent(radius);
    let (xi, yi) = (x as isize, y as isize);
    let p = |u: isize, v: isize| img.at_i(xi + u, yi + v) as f64;
    // Mirrored pairs are differenced before weighting so symmetric patches
    // cancel exactly.
    let mut m10 = 0.0;
    let mut m01 = 0.0;
    for v in -(radius as isize)..=radius as isize {
        let ext = umax[v.unsigned_abs()] as isize;
        for u in 1..=ext {
            m10 += u as f64 * (p(u, v) - p(-u, v));
        }
    }
    for v in 1..=radius as isize {
        let ext = umax[v as usize] as isize;
        let mut row = 0.0;
        for u in -ext..=ext {
            row += p(u, v) - p(u, -v);
        }
        m01 += v as f64 * row;
    }
    if m10 == 0.0 && m01 == 0.0 {
        return Ok((0.0, true));
    }
    let mut angle = m01.atan2(m10);
    if angle < 0.0 {
        angle += TAU;
    }
    if angle >= TAU {
        angle = 0.0;
    }
    Ok((angle + 0.0, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn flat_patch_scores_zero() {
        let img = GrayImage::from_fn(20, 20, |_, _| 0.4);
        assert_eq!(harris_score(&img, 10, 10, 3).unwrap(), 0.0);
    }

    #[test]
    fn l_corner_positive_edge_nonpositive() {
        let corner = GrayImage::from_fn(20, 20, |x, y| if x >= 10 && y >= 10 { 1.0 } else { 0.0 });
        assert!(harris_score(&corner, 10, 10, 3).unwrap() > 0.0);
        let edge = GrayImage::from_fn(20, 20, |x, _| if x >= 10 { 1.0 } else { 0.0 });
        assert!(harris_score(&edge, 10, 10, 3).unwrap() <= 0.0);
    }

    #[test]
    fn harris_window_bounds() {
        let img = GrayImage::from_fn(20, 20, |_, _| 0.4);
        assert!(harris_score(&img, 3, 10, 3).is_err());
        assert!(harris_score(&img, 4, 15, 3).is_ok());
        assert!(harris_score(&img, 4, 16, 3).is_err());
    }

    #[test]
    fn centroid_of_ramps() {
        let ramp_x = GrayImage::from_fn(40, 40, |x, _| x as f32 / 40.0);
        let (a, deg) = intensity_centroid_angle(&ramp_x, 20, 20, 15).unwrap();
        assert!(!deg);
        assert!(a.abs() < 1e-6, "{a}");
        let ramp_y = GrayImage::from_fn(40, 40, |_, y| y as f32 / 40.0);
        let (a, _) = intensity_centroid_angle(&ramp_y, 20, 20, 15).unwrap();
        assert!((a - FRAC_PI_2).abs() < 1e-6, "{a}");
    }

    #[test]
    fn radially_symmetric_patch_is_degenerate() {
        let img = GrayImage::from_fn(40, 40, |x, y| {
            let d = ((x as f32 - 20.0).powi(2) + (y as f32 - 20.0).powi(2)).sqrt();
            (d / 30.0).min(1.0)
        });
        assert_eq!(intensity_centroid_angle(&img, 20, 20, 15).unwrap(), (0.0, true));
    }

    #[test]
    fn circle_extent_radius_15() {
        let e = circle_extent(15);
        assert_eq!((e[0], e[15], e[9]), (15, 0, 12));
    }
}
