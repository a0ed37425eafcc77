//! Warping checks on generator scenes with ground-truth depth and pose.

use orbvo::geometry::Se3Pose;
use orbvo::losses::photometric_loss;
use orbvo::synth::{generate_scene, random_motion, SyntheticScene};
use orbvo::warp::{inverse_warp, pose_tensor, synthesize_view};
use orbvo_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scene(seed: u64, frames: usize) -> SyntheticScene {
    generate_scene(seed, frames, 64, 64, random_motion(seed)).unwrap()
}

/// Mean absolute reconstruction error and mean depth inconsistency of the
/// pair warping frame `src` into frame `tgt`, over pixels valid for the warp
/// and visible in the source.
pub fn gt_pair_errors(s: &SyntheticScene, tgt: usize, src: usize) -> (f64, f64) {
    let t = s.relative_pose(tgt, src);
    let v = synthesize_view(&s.images[src], Some(&s.depths[src]), &s.depths[tgt], &t, &s.intrinsics).unwrap();
    let visible = s.pair_mask(tgt, src);
    let sampled = v.sampled_depth.as_ref().unwrap();
    let n = s.width * s.height;
    let (mut photo, mut geo, mut count) = (0.0, 0.0, 0usize);
    for p in (0..n).filter(|&p| v.mask[p] && visible[p]) {
        for c in 0..3 {
            photo += (v.image.data[c * n + p] as f64 - s.images[tgt].data[c * n + p] as f64).abs() / 3.0;
        }
        geo += (v.proj_depth[p] - sampled[p]).abs() / (v.proj_depth[p] + sampled[p]);
        count += 1;
    }
    assert!(count > n / 2, "only {count} valid pixels");
    (photo / count as f64, geo / count as f64)
}

/// Worst reconstruction and inconsistency errors over both directions of
/// every adjacent pair of a seeded scene.
pub fn gt_scene_errors(seed: u64, frames: usize) -> (f64, f64) {
    let s = scene(seed, frames);
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..frames - 1 {
        for (a, b) in [(i, i + 1), (i + 1, i)] {
            let (p, g) = gt_pair_errors(&s, a, b);
            worst = (worst.0.max(p), worst.1.max(g));
        }
    }
    worst
}

/// Moves translation and rotation each by 10% of their own magnitude in a
/// random direction.
pub fn perturb(t: &Se3Pose, rng: &mut ChaCha8Rng) -> Se3Pose {
    let mut xi = t.log();
    for part in [0..3, 3..6] {
        let norm = xi[part.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, d) in part.zip(&dir) {
            xi[j] += 0.1 * norm * d / dn;
        }
    }
    Se3Pose::exp(&xi)
}

/// Photometric loss of frame 1 synthesized from frame 0 under `t`.
pub fn photometric_under(s: &SyntheticScene, t: &Se3Pose) -> f64 {
    let (w, h) = (s.width, s.height);
    let g = Graph::<f64>::new();
    let img = |f: usize| g.constant(s.images[f].to_tensor().cast());
    let depth = g.constant(Tensor::<f32>::new(&[1, 1, h, w], s.depths[1].clone()).unwrap().cast());
    let pose = g.constant(pose_tensor(t));
    let out = inverse_warp(&g, img(0), None, depth, pose, &s.intrinsics).unwrap();
    let lp = photometric_loss(&g, img(1), out.synthesized, &out.mask).unwrap();
    g.item(lp)
}

/// `(L_p at the true pose, L_p at a 10%-perturbed pose)` for one seed.
pub fn perturbation_trial(seed: u64) -> (f64, f64) {
    let s = scene(1000 + seed, 2);
    let t = s.relative_pose(1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (photometric_under(&s, &t), photometric_under(&s, &perturb(&t, &mut rng)))
}
