//! Metric checks against the brute-force oracles.

use super::{brute_ate, brute_rel_errors, crafted_pair, random_pose};
use orbvo::eval::{ate_rmse, kitti_rel_errors, Similarity, Trajectory};
use orbvo::geometry::Se3Pose;
use orbvo::io::{format_kitti_poses, parse_kitti_poses};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest disagreement between the library and the oracles on a crafted
/// pair: `(ate, trans_err, rot_err)`, plus the number of subsequences.
pub fn oracle_gaps(seed: u64, n: usize, step: f64) -> ([f64; 3], usize) {
    let (est, gt) = crafted_pair(seed, n, step);
    let (te, tg) = (Trajectory::from_poses(est.clone()), Trajectory::from_poses(gt.clone()));
    let ate = ate_rmse(&te, &tg).unwrap();
    let rel = kitti_rel_errors(&te, &tg).unwrap();
    let (bt, br, count) = brute_rel_errors(&est, &gt);
    assert_eq!(rel.empty, count == 0);
    ([(ate - brute_ate(&est, &gt)).abs(), (rel.trans_err - bt).abs(), (rel.rot_err - br).abs()], count)
}

pub fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
    let p = random_pose(rng, 50.0, 3.0);
    Similarity { scale: rng.random_range(0.2..5.0), rotation: p.rotation, translation: p.translation }
}

/// Change in `(ate, trans_err, rot_err)` when the estimate is moved by a
/// random similarity.
pub fn similarity_gaps(seed: u64, n: usize, step: f64) -> [f64; 3] {
    let (est, gt) = crafted_pair(seed, n, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let s = random_similarity(&mut rng);
    let moved: Vec<Se3Pose> = est.iter().map(|p| s.apply_pose(p)).collect();
    let tg = Trajectory::from_poses(gt);
    let (a, b) = (Trajectory::from_poses(est), Trajectory::from_poses(moved));
    let (ra, rb) = (kitti_rel_errors(&a, &tg).unwrap(), kitti_rel_errors(&b, &tg).unwrap());
    [
        (ate_rmse(&a, &tg).unwrap() - ate_rmse(&b, &tg).unwrap()).abs(),
        (ra.trans_err - rb.trans_err).abs(),
        (ra.rot_err - rb.rot_err).abs(),
    ]
}

/// Largest entry error after writing and re-reading random poses.
pub fn kitti_round_trip_gap(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<Se3Pose> = (0..n).map(|_| random_pose(&mut rng, 10.0, 3.0)).collect();
    let back = parse_kitti_poses(&format_kitti_poses(&poses)).unwrap();
    assert_eq!(back.len(), n);
    poses
        .iter()
        .zip(&back)
        .flat_map(|(a, b)| a.to_row_major_3x4().into_iter().zip(b.to_row_major_3x4()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}
