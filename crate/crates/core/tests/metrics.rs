mod common;

use common::metric_checks::{kitti_round_trip_gap, oracle_gaps, similarity_gaps};
use common::{crafted_pair, random_pose};
use orbvo::eval::{align_similarity, ate_rmse, kitti_rel_errors, Trajectory};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-9;

#[test]
fn metrics_match_brute_force() {
    let mut covered = 0;
    for seed in 0..20 {
        let n = 10 + (seed as usize * 7) % 41;
        let (gaps, count) = oracle_gaps(seed, n, 25.0);
        assert!(gaps.iter().all(|&g| g < ORACLE_TOL), "seed {seed}, {n} frames: {gaps:?}");
        covered += count;
    }
    assert!(covered > 100, "only {covered} subsequences exercised");
}

#[test]
fn short_paths_report_no_subsequences() {
    let (est, gt) = crafted_pair(3, 20, 1.0);
    let r = kitti_rel_errors(&Trajectory::from_poses(est), &Trajectory::from_poses(gt)).unwrap();
    assert!(r.empty);
    assert!(r.per_length.is_empty());
}

#[test]
fn metrics_ignore_similarity_of_estimate() {
    for seed in 0..20 {
        let g = similarity_gaps(seed, 50, 25.0);
        assert!(g.iter().all(|&v| v < 1e-9), "seed {seed}: {g:?}");
    }
}

#[test]
fn alignment_recovers_exact_similarity() {
    let (_, gt) = crafted_pair(11, 30, 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = common::metric_checks::random_similarity(&mut rng);
    let moved: Vec<_> = gt.iter().map(|p| s.apply_pose(p)).collect();
    let (tm, tg) = (Trajectory::from_poses(moved), Trajectory::from_poses(gt));
    let a = align_similarity(&tm, &tg).unwrap();
    assert!((a.scale * s.scale - 1.0).abs() < 1e-9);
    assert!(ate_rmse(&tm, &tg).unwrap() < 1e-9);
}

#[test]
fn kitti_files_round_trip() {
    assert!(kitti_round_trip_gap(0, 100) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identical_trajectories_score_zero(seed in 0u64..10_000, n in 3usize..50) {
        let (_, gt) = crafted_pair(seed, n, 30.0);
        let t = Trajectory::from_poses(gt);
        prop_assert!(ate_rmse(&t, &t).unwrap() < 1e-9);
        let r = kitti_rel_errors(&t, &t).unwrap();
        // acos of a trace one ulp below 3 is already ~3e-8 rad.
        prop_assert!(r.trans_err < 1e-9 && r.rot_err < 1e-5, "{} {}", r.trans_err, r.rot_err);
    }

    #[test]
    fn oracle_agreement_holds(seed in 0u64..10_000, n in 3usize..50) {
        let (gaps, _) = oracle_gaps(seed, n, 30.0);
        prop_assert!(gaps.iter().all(|&g| g < ORACLE_TOL), "{:?}", gaps);
    }

    #[test]
    fn round_trip_stays_within_print_precision(seed in 0u64..10_000) {
        prop_assert!(kitti_round_trip_gap(seed, 5) < 1e-5);
    }

    #[test]
    fn ate_is_nonnegative_and_finite(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<_> = (0..12).map(|_| random_pose(&mut rng, 5.0, 1.0)).collect();
        let b: Vec<_> = (0..12).map(|_| random_pose(&mut rng, 5.0, 1.0)).collect();
        let e = ate_rmse(&Trajectory::from_poses(a), &Trajectory::from_poses(b)).unwrap();
        prop_assert!(e.is_finite() && e >= 0.0);
    }
}
