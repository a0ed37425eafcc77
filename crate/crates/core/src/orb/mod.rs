//! Oriented FAST keypoints, steered BRIEF descriptors and their dense packing.

mod brief;
mod fast;
mod format;
mod harris;
mod pack;

pub use brief::{angle_bin, default_pattern, hamming, rbrief_descriptor, BriefPattern, ANGLE_BINS, N_PAIRS, PATCH_RADIUS, PATTERN_SEED};
pub use fast::{fast_detect, segment_score, Corner, ARC, RING};
pub use format::{read_binary, read_json, write_binary, write_json, ORBF_MAGIC, ORBF_RECORD_BYTES, ORBF_VERSION};
pub use harris::{harris_score, intensity_centroid_angle, CENTROID_RADIUS, HARRIS_BLOCK, HARRIS_K};
pub use pack::{assemble_pose_inputs, make_pose_inputs, orb_tensor_for, pack_orb_tensor, OrbTensor, PoseInputs, PoseVariant, ORB_CHANNELS};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;

/// Keypoints closer than this to a level's border are discarded before ranking.
pub const BORDER_MARGIN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct OrbKeypoint {
    /// Level-0 pixel coordinates.
    pub x: f32,
    pub y: f32,
    pub level: u8,
    /// Radians in `[0, 2pi)`.
    pub angle: f32,
    /// Harris response at the keypoint's level.
    pub response: f64,
    pub descriptor: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbFeatureSet {
    pub width: usize,
    pub height: usize,
    pub keypoints: Vec<OrbKeypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbParams {
    pub n_features: usize,
    pub levels: usize,
    pub scale_factor: f64,
    pub fast_threshold: f32,
    pub nms_radius: usize,
}

impl Default for OrbParams {
    fn default() -> Self {
        Self { n_features: 1000, levels: 3, scale_factor: 2.0, fast_threshold: 0.08, nms_radius: 1 }
    }
}

impl OrbParams {
    /// Same parameters with `levels` reduced until every level fits the patch.
    pub fn fitted_to(mut self, width: usize, height: usize) -> Self {
        while self.levels > 1 {
            let (w, h) = level_dims(width, height, self.scale_factor, self.levels - 1);
            if w.min(h) >= PATCH_SIZE {
                break;
            }
            self.levels -= 1;
        }
        self
    }
}

pub const PATCH_SIZE: usize = 2 * PATCH_RADIUS + 1;

fn level_dims(width: usize, height: usize, scale: f64, level: usize) -> (usize, usize) {
    let s = scale.powi(level as i32);
    ((width as f64 / s).floor() as usize, (height as f64 / s).floor() as usize)
}

/// Image pyramid; level `k` is `floor(dim / scale^k)` and is produced from
/// level `k-1` by box averaging over `scale x scale` blocks then decimating.
/// Only integer scale factors are supported.
pub fn build_pyramid(img: &GrayImage, scale_factor: f64, levels: usize) -> Result<Vec<GrayImage>> {
    if levels == 0 {
        return invalid("pyramid needs at least one level");
    }
    if !(scale_factor >= 2.0 && scale_factor.fract() == 0.0) {
        return invalid(format!("scale factor must be an integer >= 2, got {scale_factor}"));
    }
    for level in 0..levels {
        let (w, h) = level_dims(img.width, img.height, scale_factor, level);
        if w < PATCH_SIZE || h < PATCH_SIZE {
            return Err(Error::PyramidTooDeep { level, width: w, height: h });
        }
    }
    let s = scale_factor as usize;
    let norm = 1.0 / (s * s) as f32;
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("level 0 pushed");
        let (w, h) = (prev.width / s, prev.height / s);
        let next = GrayImage::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for dy in 0..s {
                for dx in 0..s {
                    acc += prev.at(x * s + dx, y * s + dy);
                }
            }
            acc * norm
        });
        out.push(next);
    }
    Ok(out)
}

struct Candidate {
    level: usize,
    x: usize,
    y: usize,
    response: f64,
}

/// Detects, ranks, orients and describes keypoints. Candidates are ordered by
/// descending Harris response with ties broken by `(level, y, x)`.
pub fn extract_orb(img: &GrayImage, params: &OrbParams) -> Result<OrbFeatureSet> {
    let pyramid = build_pyramid(img, params.scale_factor, params.levels)?;
    let mut cands = Vec::new();
    for (level, lvl) in pyramid.iter().enumerate() {
        for c in fast_detect(lvl, params.fast_threshold, params.nms_radius)? {
            if c.x < BORDER_MARGIN || c.y < BORDER_MARGIN || c.x + BORDER_MARGIN >= lvl.width || c.y + BORDER_MARGIN >= lvl.height {
                continue;
            }
            let response = harris_score(lvl, c.x, c.y, HARRIS_BLOCK)?;
            cands.push(Candidate { level, x: c.x, y: c.y, response });
        }
    }
    cands.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then((a.level, a.y, a.x).cmp(&(b.level, b.y, b.x)))
    });
    cands.truncate(params.n_features);
    let pattern = default_pattern();
    let keypoints = cands
        .iter()
        .map(|c| {
            let lvl = &pyramid[c.level];
            let (angle, _) = intensity_centroid_angle(lvl, c.x, c.y, CENTROID_RADIUS)?;
            let descriptor = rbrief_descriptor(lvl, c.x, c.y, angle, pattern)?;
            let s = params.scale_factor.powi(c.level as i32);
            Ok(OrbKeypoint {
                x: (c.x as f64 * s) as f32,
                y: (c.y as f64 * s) as f32,
                level: c.level as u8,
                angle: angle as f32,
                response: c.response,
                descriptor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OrbFeatureSet { width: img.width, height: img.height, keypoints })
}
