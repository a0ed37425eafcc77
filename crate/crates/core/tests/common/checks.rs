//! ORB and packing checks shared by the ORB suite and the acceptance run.

use super::{rotate_about_centre, smooth_texture};
use orbvo::image::GrayImage;
use orbvo::orb::{
    default_pattern, hamming, intensity_centroid_angle, pack_orb_tensor, rbrief_descriptor, OrbFeatureSet, OrbKeypoint, CENTROID_RADIUS,
    ORB_CHANNELS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

fn pair_values(img: &GrayImage, x: usize, y: usize, angle: f64) -> Vec<(f32, f32)> {
    let bin = orbvo::orb::angle_bin(angle);
    default_pattern()
        .steered(bin)
        .iter()
        .map(|pq| {
            let a = img.at((x as isize + pq[0] as isize) as usize, (y as isize + pq[1] as isize) as usize);
            let b = img.at((x as isize + pq[2] as isize) as usize, (y as isize + pq[3] as isize) as usize);
            (a, b)
        })
        .collect()
}

/// Hamming distance between a random patch's descriptor and that of its
/// photometric inverse, after checking every bit against its pixel pair.
/// `None` when some pair compares equal, which leaves its bit unflipped.
pub fn inverted_patch_distance(seed: u64) -> Result<Option<u32>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = GrayImage::new(48, 48, (0..48 * 48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let inv = GrayImage::new(48, 48, img.values.iter().map(|v| 1.0 - v).collect()).unwrap();
    let angle = rng.random_range(0.0..TAU);
    let pairs = pair_values(&img, 24, 24, angle);
    if pairs.iter().any(|(a, b)| a == b) {
        return Ok(None);
    }
    let d0 = rbrief_descriptor(&img, 24, 24, angle, default_pattern()).map_err(|e| e.to_string())?;
    let d1 = rbrief_descriptor(&inv, 24, 24, angle, default_pattern()).map_err(|e| e.to_string())?;
    for (i, (a, b)) in pairs.iter().enumerate() {
        if (d0[i / 8] >> (i % 8) & 1 == 1) != (a < b) {
            return Err(format!("bit {i} disagrees with its pixel pair"));
        }
    }
    Ok(Some(hamming(&d0, &d1)))
}

/// Hamming distances between each patch's descriptor and that of the same
/// patch rotated by one 12-degree bin, with the angle advanced to match.
pub fn rotation_distances(count: u64) -> Vec<u32> {
    let theta = TAU / 30.0;
    (0..count)
        .map(|seed| {
            let img = smooth_texture(seed, 64, 64);
            let (a, _) = intensity_centroid_angle(&img, 32, 32, CENTROID_RADIUS).unwrap();
            let rot = rotate_about_centre(&img, theta);
            let d0 = rbrief_descriptor(&img, 32, 32, a, default_pattern()).unwrap();
            let d1 = rbrief_descriptor(&rot, 32, 32, a + theta, default_pattern()).unwrap();
            hamming(&d0, &d1)
        })
        .collect()
}

/// Random feature set with deliberate collisions and distinct responses.
pub fn random_features(seed: u64, w: usize, h: usize, n: usize) -> OrbFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut responses: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
    for i in (1..n).rev() {
        responses.swap(i, rng.random_range(0..=i));
    }
    let mut keypoints: Vec<OrbKeypoint> = Vec::with_capacity(n);
    for &response in &responses {
        let (x, y) = if !keypoints.is_empty() && rng.random_bool(0.25) {
            let other = &keypoints[rng.random_range(0..keypoints.len())];
            let (ox, oy) = (other.x.round(), other.y.round());
            ((ox + rng.random_range(-0.45..0.45)).max(0.0), (oy + rng.random_range(-0.45..0.45)).max(0.0))
        } else {
            (rng.random_range(0.0..w as f32 - 0.5), rng.random_range(0.0..h as f32 - 0.5))
        };
        keypoints.push(OrbKeypoint { x, y, level: 0, angle: 0.0, response, descriptor: std::array::from_fn(|_| rng.random()) });
    }
    OrbFeatureSet { width: w, height: h, keypoints }
}

/// Re-reads a packed tensor cell by cell against the feature list.
pub fn check_packing(set: &OrbFeatureSet, w: usize, h: usize) -> Result<(), String> {
    let t = pack_orb_tensor(set, w, h);
    if t.tensor.shape() != [ORB_CHANNELS, h, w] {
        return Err(format!("shape {:?}", t.tensor.shape()));
    }
    let plane = w * h;
    let d = t.tensor.data();
    let mut winners = std::collections::BTreeMap::new();
    for kp in &set.keypoints {
        let px = (kp.x.round() as usize, kp.y.round() as usize);
        let e = winners.entry(px).or_insert(kp);
        if kp.response > e.response {
            *e = kp;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            match winners.get(&(x, y)) {
                Some(kp) => {
                    if d[p] != 1.0 {
                        return Err(format!("({x}, {y}) not marked"));
                    }
                    for j in 0..32 {
                        if d[(1 + j) * plane + p] != kp.descriptor[j] as f32 / 255.0 {
                            return Err(format!("({x}, {y}) byte {j}"));
                        }
                    }
                }
                None => {
                    if (0..ORB_CHANNELS).any(|c| d[c * plane + p] != 0.0) {
                        return Err(format!("({x}, {y}) should be empty"));
                    }
                }
            }
        }
    }
    let ones = d[..plane].iter().filter(|&&v| v == 1.0).count();
    if ones != winners.len() || t.placed != winners.len() {
        return Err(format!("{ones} marks for {} occupied pixels", winners.len()));
    }
    Ok(())
}

/// Checks both pose-input layouts for random frames and feature sets.
pub fn check_assembly(seed: u64, w: usize, h: usize) -> Result<(), String> {
    use orbvo::image::Image;
    use orbvo::orb::{make_pose_inputs, PoseInputs, PoseVariant};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame = || Image::new(3, w, h, (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let (fa, fb) = (frame(), frame());
    let (sa, sb) = (random_features(seed, w, h, 30), random_features(seed + 1, w, h, 30));
    let (ta, tb) = (pack_orb_tensor(&sa, w, h), pack_orb_tensor(&sb, w, h));
    let plane = w * h;
    let rgb_a = |c: usize| &fa.data[c * plane..(c + 1) * plane];
    let rgb_b = |c: usize| &fb.data[c * plane..(c + 1) * plane];
    let orb_a = |c: usize| &ta.tensor.data()[c * plane..(c + 1) * plane];
    let orb_b = |c: usize| &tb.tensor.data()[c * plane..(c + 1) * plane];
    let PoseInputs::Concatenate(cat) = make_pose_inputs(&fa, &fb, &sa, &sb, PoseVariant::Concatenate).map_err(|e| e.to_string())? else {
        return Err("wrong variant".into());
    };
    if cat.shape() != [1, 72, h, w] {
        return Err(format!("concatenate shape {:?}", cat.shape()));
    }
    let ch = |t: &orbvo_autodiff::Tensor<f32>, c: usize| t.data()[c * plane..(c + 1) * plane].to_vec();
    for c in 0..72 {
        let want = match c {
            0..=2 => rgb_a(c),
            3..=35 => orb_a(c - 3),
            36..=38 => rgb_b(c - 36),
            _ => orb_b(c - 39),
        };
        if ch(&cat, c) != want {
            return Err(format!("concatenate channel {c}"));
        }
    }
    let PoseInputs::Attention { rgb, orb } = make_pose_inputs(&fa, &fb, &sa, &sb, PoseVariant::Attention).map_err(|e| e.to_string())? else {
        return Err("wrong variant".into());
    };
    if rgb.shape() != [1, 6, h, w] || orb.shape() != [1, 66, h, w] {
        return Err(format!("attention shapes {:?} {:?}", rgb.shape(), orb.shape()));
    }
    for c in 0..6 {
        if ch(&rgb, c) != if c < 3 { rgb_a(c) } else { rgb_b(c - 3) } {
            return Err(format!("rgb channel {c}"));
        }
    }
    for c in 0..66 {
        if ch(&orb, c) != if c < 33 { orb_a(c) } else { orb_b(c - 33) } {
            return Err(format!("orb channel {c}"));
        }
    }
    Ok(())
}
