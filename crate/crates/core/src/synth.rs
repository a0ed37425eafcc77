//! Procedural scenes with exact ground truth: a smooth depth surface seen by
//! frame 0, painted with value noise, re-rendered along a camera path.

use crate::error::{invalid, Error, Result};
use crate::geometry::{project, CameraIntrinsics, PoseVector6, Se3Pose};
use crate::image::Image;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

pub const MIN_SCENE_DEPTH: f64 = 2.0;
pub const MAX_SCENE_DEPTH: f64 = 10.0;
pub const MIN_OVERLAP: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    /// Sum of four seeded sinusoids around 6 m.
    Waves,
    /// Fronto-parallel plane at the given depth.
    Plane(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Camera motion per frame, expressed in the previous camera's frame.
    pub motion: PoseVector6,
    pub surface: Surface,
}

impl SceneConfig {
    pub fn new(width: usize, height: usize, frames: usize, motion: PoseVector6) -> Self {
        Self { width, height, frames, motion, surface: Surface::Waves }
    }
}

/// Default forward-drifting motion used by the toy experiments.
pub const DEFAULT_MOTION: PoseVector6 = [0.04, 0.0, 0.25, 0.0, 0.012, 0.0];

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world poses; frame 0 is the world frame.
    pub poses: Vec<Se3Pose>,
    pub depths: Vec<Vec<f32>>,
    pub images: Vec<Image>,
    /// Pixels whose surface point lies inside frame 0's view.
    pub masks: Vec<Vec<bool>>,
    /// Frame-0 pixel coordinates of each pixel's surface point.
    pub source_coords: Vec<Vec<(f64, f64)>>,
}

impl SyntheticScene {
    pub fn frames(&self) -> usize {
        self.images.len()
    }

    /// Transform mapping frame-`a` camera coordinates into frame `b`.
    pub fn relative_pose(&self, a: usize, b: usize) -> Se3Pose {
        self.poses[b].inverse().compose(&self.poses[a])
    }

    /// Pixels of frame `tgt` whose surface point is visible in frame `src`:
    /// projected inside the image, in front of the camera, and not occluded
    /// (source depth agrees with the projected depth).
    pub fn pair_mask(&self, tgt: usize, src: usize) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        let t = self.relative_pose(tgt, src);
        let sd = &self.depths[src];
        (0..w * h)
            .map(|p| {
                let pr = project((p % w) as f64, (p / w) as f64, self.depths[tgt][p] as f64, &t, &self.intrinsics);
                if pr.behind || !(0.0..=(w - 1) as f64).contains(&pr.u) || !(0.0..=(h - 1) as f64).contains(&pr.v) {
                    return false;
                }
                let x0 = (pr.u.floor() as usize).min(w - 2);
                let y0 = (pr.v.floor() as usize).min(h - 2);
                let (fx, fy) = (pr.u - x0 as f64, pr.v - y0 as f64);
                let d = |x: usize, y: usize| sd[y * w + x] as f64;
                let interp = (1.0 - fy) * ((1.0 - fx) * d(x0, y0) + fx * d(x0 + 1, y0))
                    + fy * ((1.0 - fx) * d(x0, y0 + 1) + fx * d(x0 + 1, y0 + 1));
                (interp - pr.z).abs() < 1e-2 * pr.z
            })
            .collect()
    }
}

struct Waves {
    amp: [f64; 4],
    freq: [(f64, f64); 4],
    phase: [f64; 4],
}

struct World {
    k: CameraIntrinsics,
    width: f64,
    height: f64,
    surface: Surface,
    waves: Waves,
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, layer: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(layer ^ splitmix((ix as u64) ^ splitmix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Value noise in `[0, 1]` with quintic interpolation between lattice points
/// spaced `cell` pixels apart.
fn value_noise(seed: u64, layer: u64, u: f64, v: f64, cell: f64) -> f64 {
    let (x, y) = (u / cell, v / cell);
    let (ix, iy) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (fade(x - ix as f64), fade(y - iy as f64));
    let l = |dx: i64, dy: i64| lattice(seed, layer, ix + dx, iy + dy);
    let top = l(0, 0) + (l(1, 0) - l(0, 0)) * fx;
    let bot = l(0, 1) + (l(1, 1) - l(0, 1)) * fx;
    top + (bot - top) * fy
}

impl World {
    fn new(seed: u64, cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut amp = [0.0; 4];
        let mut freq = [(0.0, 0.0); 4];
        let mut phase = [0.0; 4];
        for i in 0..4 {
            amp[i] = rng.random_range(0.3..0.85);
            let f: f64 = rng.random_range(0.4..1.3);
            let dir: f64 = rng.random_range(0.0..TAU);
            freq[i] = (f * dir.cos(), f * dir.sin());
            phase[i] = rng.random_range(0.0..TAU);
        }
        Self {
            k: CameraIntrinsics::for_size(cfg.width, cfg.height),
            width: cfg.width as f64,
            height: cfg.height as f64,
            surface: cfg.surface,
            waves: Waves { amp, freq, phase },
            seed,
        }
    }

    /// Depth seen by frame 0 through pixel `(u, v)`.
    fn depth0(&self, u: f64, v: f64) -> f64 {
        match self.surface {
            Surface::Plane(d) => d,
            Surface::Waves => {
                let (s, t) = (u / self.width, v / self.height);
                let w = &self.waves;
                6.0 + (0..4)
                    .map(|i| w.amp[i] * (TAU * (w.freq[i].0 * s + w.freq[i].1 * t) + w.phase[i]).sin())
                    .sum::<f64>()
            }
        }
    }

    fn texture(&self, u: f64, v: f64) -> [f64; 3] {
        let s = self.seed;
        let base = 0.6 * value_noise(s, 1, u, v, 24.0) + 0.25 * value_noise(s, 2, u, v, 13.0);
        let mut rgb = [0.0; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let tint = value_noise(s, 10 + c as u64, u, v, 18.0);
            *out = 0.1 + 0.8 * (base + 0.15 * tint);
        }
        rgb
    }

    /// Signed gap between a world point and the surface along frame 0's ray,
    /// plus the point's frame-0 pixel.
    fn gap(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let (u0, v0) = self.k.project(p);
        (p.z - self.depth0(u0, v0), u0, v0)
    }

    /// Marches the ray of pixel `(u, v)` from camera `c` to the first surface
    /// crossing. Returns camera depth and frame-0 pixel of the hit.
    fn cast(&self, c: &Se3Pose, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        let dir = c.rotation * self.k.unproject(u, v);
        let at = |s: f64| c.translation + dir * s;
        let mut s0 = 0.25;
        let (mut f0, _, _) = self.gap(&at(s0));
        if f0 >= 0.0 {
            return None;
        }
        while s0 < 4.0 * MAX_SCENE_DEPTH {
            let step = (0.3 * -f0).clamp(0.004, 0.25);
            let s1 = s0 + step;
            let (f1, _, _) = self.gap(&at(s1));
            if f1 >= 0.0 {
                let (mut lo, mut hi) = (s0, s1);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.gap(&at(mid)).0 >= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let s = 0.5 * (lo + hi);
                let (_, u0, v0) = self.gap(&at(s));
                return Some((s, u0, v0));
            }
            s0 = s1;
            f0 = f1;
        }
        None
    }
}

pub fn generate_scene(seed: u64, frames: usize, width: usize, height: usize, motion: PoseVector6) -> Result<SyntheticScene> {
    generate_scene_with(seed, &SceneConfig::new(width, height, frames, motion))
}

pub fn generate_scene_with(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    let (w, h) = (cfg.width, cfg.height);
    if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
        return invalid(format!("scene size {w}x{h} must be a positive multiple of 32"));
    }
    if cfg.frames == 0 {
        return invalid("scene needs at least one frame");
    }
    if let Surface::Plane(d) = cfg.surface {
        if !(MIN_SCENE_DEPTH..=MAX_SCENE_DEPTH).contains(&d) {
            return invalid(format!("plane depth {d} outside [2, 10] m"));
        }
    }
    let world = World::new(seed, cfg);
    let step = Se3Pose::exp(&cfg.motion);
    let mut poses = vec![Se3Pose::identity()];
    for i in 1..cfg.frames {
        poses.push(poses[i - 1].compose(&step));
    }
    let tol = orbvo_autodiff::EDGE_TOLERANCE;
    let (wspan, hspan) = (-tol..=(w - 1) as f64 + tol, -tol..=(h - 1) as f64 + tol);
    let mut depths = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut coords = Vec::new();
    for (f, c) in poses.iter().enumerate() {
        let mut depth = vec![0f32; w * h];
        let mut data = vec![0f32; 3 * w * h];
        let mut mask = vec![false; w * h];
        let mut src = vec![(f64::NAN, f64::NAN); w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (s, u0, v0) = if f == 0 {
                    (world.depth0(x as f64, y as f64), x as f64, y as f64)
                } else {
                    world.cast(c, x as f64, y as f64).ok_or(Error::MotionTooLarge { frame: f, overlap: 0.0 })?
                };
                depth[p] = s as f32;
                let rgb = world.texture(u0, v0);
                for ch in 0..3 {
                    data[ch * w * h + p] = rgb[ch] as f32;
                }
                mask[p] = wspan.contains(&u0) && hspan.contains(&v0);
                src[p] = (u0, v0);
            }
        }
        let overlap = mask.iter().filter(|&&m| m).count() as f64 / (w * h) as f64;
        if overlap < MIN_OVERLAP {
            return Err(Error::MotionTooLarge { frame: f, overlap: 100.0 * overlap });
        }
        depths.push(depth);
        images.push(Image::new(3, w, h, data)?);
        masks.push(mask);
        coords.push(src);
    }
    Ok(SyntheticScene {
        seed,
        width: w,
        height: h,
        intrinsics: world.k,
        poses,
        depths,
        images,
        masks,
        source_coords: coords,
    })
}

/// Seeded per-sequence motion around [`DEFAULT_MOTION`].
pub fn random_motion(seed: u64) -> PoseVector6 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
    [
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.02..0.02),
        rng.random_range(0.12..0.3),
        rng.random_range(-0.006..0.006),
        rng.random_range(-0.015..0.015),
        rng.random_range(-0.006..0.006),
    ]
}
