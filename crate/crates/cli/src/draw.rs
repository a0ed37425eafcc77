//! Raster overlays for keypoints and attention heatmaps.

use orbvo::orb::OrbFeatureSet;
use orbvo::{GrayImage, Image};

const LEVEL_COLOURS: [[f32; 3]; 4] = [[0.1, 1.0, 0.2], [1.0, 0.8, 0.0], [1.0, 0.2, 0.9], [0.2, 0.8, 1.0]];

fn put(img: &mut Image, x: isize, y: isize, rgb: [f32; 3]) {
    if x < 0 || y < 0 || x as usize >= img.width || y as usize >= img.height {
        return;
    }
    let p = y as usize * img.width + x as usize;
    let n = img.width * img.height;
    for (c, v) in rgb.iter().enumerate() {
        img.data[c * n + p] = *v;
    }
}

/// Grey background with a circle per keypoint, sized by pyramid level, and a
/// tick from the centre along its orientation.
pub fn keypoint_overlay(gray: &GrayImage, set: &OrbFeatureSet) -> Image {
    let mut data = Vec::with_capacity(3 * gray.values.len());
    for _ in 0..3 {
        data.extend(gray.values.iter().map(|v| 0.25 + 0.5 * v));
    }
    let mut img = Image::new(3, gray.width, gray.height, data).expect("three planes");
    for kp in &set.keypoints {
        let colour = LEVEL_COLOURS[kp.level as usize % LEVEL_COLOURS.len()];
        let r = 3.0 * f64::from(1u32 << kp.level.min(8));
        let (cx, cy) = (kp.x as f64, kp.y as f64);
        let steps = (8.0 * r).ceil() as usize;
        for i in 0..steps {
            let t = i as f64 / steps as f64 * std::f64::consts::TAU;
            put(&mut img, (cx + r * t.cos()).round() as isize, (cy + r * t.sin()).round() as isize, colour);
        }
        let (dx, dy) = ((kp.angle as f64).cos(), (kp.angle as f64).sin());
        for s in 0..=r.ceil() as usize {
            put(&mut img, (cx + dx * s as f64).round() as isize, (cy + dy * s as f64).round() as isize, colour);
        }
    }
    img
}

/// Dark blue through red to pale yellow.
fn colour_map(v: f64) -> [f32; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.05, 0.02, 0.3], [0.55, 0.05, 0.55], [0.95, 0.3, 0.1], [1.0, 0.95, 0.6]];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) as f32)
}

pub fn heatmap_image(values: &[f64], width: usize, height: usize) -> Image {
    let n = width * height;
    let mut data = vec![0f32; 3 * n];
    for (p, &v) in values.iter().enumerate() {
        let rgb = colour_map(v);
        for c in 0..3 {
            data[c * n + p] = rgb[c];
        }
    }
    Image::new(3, width, height, data).expect("three planes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use orbvo::orb::OrbKeypoint;

    #[test]
    fn overlay_marks_centre_ring_and_tick() {
        let gray = GrayImage::from_fn(40, 40, |_, _| 0.5);
        let kp = OrbKeypoint { x: 20.0, y: 20.0, level: 0, angle: 0.0, response: 1.0, descriptor: [0; 32] };
        let set = OrbFeatureSet { width: 40, height: 40, keypoints: vec![kp] };
        let img = keypoint_overlay(&gray, &set);
        let green = |x: usize, y: usize| img.get(1, x, y) == 1.0;
        assert!(green(23, 20) && green(17, 20) && green(20, 23) && green(21, 20));
        assert!(!green(20, 21));
        assert!(!green(5, 5));
    }

    #[test]
    fn colour_map_is_monotone_in_red() {
        let reds: Vec<f32> = (0..=10).map(|i| colour_map(i as f64 / 10.0)[0]).collect();
        assert!(reds.windows(2).all(|w| w[1] >= w[0]));
    }
}
