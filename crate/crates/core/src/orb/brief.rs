//! Steered BRIEF with a fixed Gaussian sampling pattern.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;
use std::sync::OnceLock;

pub const PATCH_RADIUS: usize = 15;
pub const N_PAIRS: usize = 256;
pub const ANGLE_BINS: usize = 30;
pub const PATTERN_SEED: u64 = 0x0b1e_f5ee_d202_4001;

/// 256 test pairs `(px, py, qx, qy)` and their 30 rotated, rounded variants.
#[derive(Debug, Clone)]
pub struct BriefPattern {
    pub pairs: Vec<[f64; 4]>,
    rotated: Vec<Vec<[i8; 4]>>,
}

fn rotate_round(p: (f64, f64), angle: f64) -> (i8, i8) {
    let (s, c) = angle.sin_cos();
    ((c * p.0 - s * p.1).round() as i8, (s * p.0 + c * p.1).round() as i8)
}

impl BriefPattern {
    /// Points are drawn from an isotropic Gaussian with sigma 31/5, rejected
    /// outside the radius-15 disc so every rotation stays inside the 31x31
    /// patch. Pairs whose endpoints coincide under any rotation are redrawn.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 31.0 / 5.0).expect("positive sigma");
        let r2 = (PATCH_RADIUS * PATCH_RADIUS) as f64;
        let point = |rng: &mut ChaCha8Rng| loop {
            let (x, y): (f64, f64) = (normal.sample(rng), normal.sample(rng));
            if x * x + y * y <= r2 {
                break (x, y);
            }
        };
        let mut pairs = Vec::with_capacity(N_PAIRS);
        while pairs.len() < N_PAIRS {
            let p = point(&mut rng);
            let q = point(&mut rng);
            let distinct = (0..ANGLE_BINS).all(|b| {
                let a = b as f64 * TAU / ANGLE_BINS as f64;
                rotate_round(p, a) != rotate_round(q, a)
            });
            if distinct {
                pairs.push([p.0, p.1, q.0, q.1]);
            }
        }
        let rotated = (0..ANGLE_BINS)
            .map(|b| {
                let a = b as f64 * TAU / ANGLE_BINS as f64;
                pairs
                    .iter()
                    .map(|pq| {
                        let p = rotate_round((pq[0], pq[1]), a);
                        let q = rotate_round((pq[2], pq[3]), a);
                        [p.0, p.1, q.0, q.1]
                    })
                    .collect()
            })
            .collect();
        Self { pairs, rotated }
    }

    /// Integer offsets for one angle bin.
    pub fn steered(&self, bin: usize) -> &[[i8; 4]] {
        &self.rotated[bin % ANGLE_BINS]
    }
}

pub fn default_pattern() -> &'static BriefPattern {
    static PATTERN: OnceLock<BriefPattern> = OnceLock::new();
    PATTERN.get_or_init(|| BriefPattern::generate(PATTERN_SEED))
}

/// Nearest multiple of `2pi/30`, as a bin index.
pub fn angle_bin(angle: f64) -> usize {
    let step = TAU / ANGLE_BINS as f64;
    ((angle / step).round() as i64).rem_euclid(ANGLE_BINS as i64) as usize
}

/// Bit `i` is set iff `I(p_i) < I(q_i)` after steering the pattern.
pub fn rbrief_descriptor(img: &GrayImage, x: usize, y: usize, angle: f64, pattern: &BriefPattern) -> Result<[u8; 32]> {
    let r = PATCH_RADIUS;
    if x < r || y < r || x + r >= img.width || y + r >= img.height {
        return Err(Error::OutOfBounds(format!(
            "descriptor patch at ({x}, {y}) exits {}x{}",
            img.width, img.height
        )));
    }
    let (xi, yi) = (x as isize, y as isize);
    let mut desc = [0u8; 32];
    for (i, pq) in pattern.steered(angle_bin(angle)).iter().enumerate() {
        let a = img.at_i(xi + pq[0] as isize, yi + pq[1] as isize);
        let b = img.at_i(xi + pq[2] as isize, yi + pq[3] as isize);
        if a < b {
            desc[i / 8] |= 1 << (i % 8);
        }
    }
    Ok(desc)
}

pub fn hamming(a: &[u8; 32], b: &[u8; 32]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}
