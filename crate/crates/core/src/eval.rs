//! Trajectory metrics: ATE after similarity alignment and KITTI-style
//! relative errors over 100 to 800 m subsequences.

use crate::error::{Error, Result};
use crate::geometry::Se3Pose;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Camera-to-world poses keyed by strictly increasing frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<usize>,
    poses: Vec<Se3Pose>,
}

impl Trajectory {
    pub fn new(frames: Vec<usize>, poses: Vec<Se3Pose>) -> Result<Self> {
        if frames.len() != poses.len() {
            return Err(Error::InvalidInput(format!("{} frame indices for {} poses", frames.len(), poses.len())));
        }
        if let Some(w) = frames.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!("frame indices not increasing at {} -> {}", w[0], w[1])));
        }
        Ok(Self { frames, poses })
    }

    /// Poses for frames `0, 1, 2, ...`.
    pub fn from_poses(poses: Vec<Se3Pose>) -> Self {
        Self { frames: (0..poses.len()).collect(), poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn poses(&self) -> &[Se3Pose] {
        &self.poses
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }
}

/// `x -> scale * rotation * x + translation`, mapping estimate onto ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Applies the similarity to a camera-to-world pose.
    pub fn apply_pose(&self, p: &Se3Pose) -> Se3Pose {
        Se3Pose::new(self.rotation * p.rotation, self.apply(&p.translation))
    }
}

fn check_pairing(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.frames != gt.frames {
        let first = est.frames.iter().zip(&gt.frames).position(|(a, b)| a != b);
        return Err(Error::Pairing(match first {
            Some(i) => format!("frame {} of the estimate pairs with frame {} of the ground truth", est.frames[i], gt.frames[i]),
            None => format!("estimate has {} poses, ground truth {}", est.len(), gt.len()),
        }));
    }
    Ok(())
}

/// Least-squares similarity via the SVD of the cross-covariance. With
/// `need_rotation` unset, collinear positions are accepted since the scale
/// stays well defined.
fn umeyama(est: &[Vector3<f64>], gt: &[Vector3<f64>], need_rotation: bool) -> Result<Similarity> {
    let n = est.len();
    if n < 3 {
        return Err(Error::Alignment(format!("need at least 3 positions, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_x = est.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_y = gt.iter().sum::<Vector3<f64>>() * inv_n;
    let var_x = est.iter().map(|x| (x - mu_x).norm_squared()).sum::<f64>() * inv_n;
    let mut cov = Matrix3::zeros();
    for (x, y) in est.iter().zip(gt) {
        cov += (y - mu_y) * (x - mu_x).transpose();
    }
    cov *= inv_n;
    if !(var_x > 0.0) {
        return Err(Error::Alignment("estimated positions are all identical".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = svd.singular_values;
    // Sort descending so the reflection guard flips the weakest axis.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v_t = Matrix3::from_rows(&[v_t.row(order[0]), v_t.row(order[1]), v_t.row(order[2])]);
    d = Vector3::new(d[order[0]], d[order[1]], d[order[2]]);
    if d[0] <= 0.0 {
        return Err(Error::Alignment("positions are uncorrelated".into()));
    }
    if need_rotation && d[1] <= 1e-12 * d[0] {
        return Err(Error::Alignment("positions are collinear; rotation is undetermined".into()));
    }
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        s[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = d.dot(&s) / var_x;
    let translation = mu_y - rotation * mu_x * scale;
    Ok(Similarity { scale, rotation, translation })
}

/// Closed-form 7-DoF alignment of the estimate onto the ground truth.
pub fn align_similarity(est: &Trajectory, gt: &Trajectory) -> Result<Similarity> {
    check_pairing(est, gt)?;
    umeyama(&est.positions(), &gt.positions(), true)
}

fn rmse_after(est: &Trajectory, gt: &Trajectory, s: &Similarity) -> f64 {
    let sum: f64 = est
        .positions()
        .iter()
        .zip(gt.positions())
        .map(|(e, g)| (s.apply(e) - g).norm_squared())
        .sum();
    (sum / est.len() as f64).sqrt()
}

pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let s = align_similarity(est, gt)?;
    Ok(rmse_after(est, gt, &s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthError {
    pub length: f64,
    /// Percent.
    pub trans_err: f64,
    /// Degrees per 100 m.
    pub rot_err: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelErrors {
    pub trans_err: f64,
    pub rot_err: f64,
    pub per_length: Vec<LengthError>,
    /// Set when the ground truth is too short for any subsequence.
    pub empty: bool,
    pub scale: f64,
}

fn cumulative_distance(gt: &Trajectory) -> Vec<f64> {
    let mut dist = vec![0.0];
    for w in gt.poses.windows(2) {
        let last = *dist.last().expect("non-empty");
        dist.push(last + (w[1].translation - w[0].translation).norm());
    }
    dist
}

/// KITTI odometry errors, after scaling the estimate by the global
/// similarity scale. Every frame is a start frame.
pub fn kitti_rel_errors(est: &Trajectory, gt: &Trajectory) -> Result<RelErrors> {
    check_pairing(est, gt)?;
    let scale = umeyama(&est.positions(), &gt.positions(), false)?.scale;
    let scaled: Vec<Se3Pose> = est.poses.iter().map(|p| Se3Pose::new(p.rotation, p.translation * scale)).collect();
    let dist = cumulative_distance(gt);
    let mut per_length = Vec::new();
    let (mut t_sum, mut r_sum, mut total) = (0.0, 0.0, 0usize);
    for &len in &SEGMENT_LENGTHS {
        let (mut t_len, mut r_len, mut count) = (0.0, 0.0, 0usize);
        for i in 0..gt.len() {
            let Some(j) = (i..gt.len()).find(|&j| dist[j] > dist[i] + len) else {
                continue;
            };
            let gt_rel = gt.poses[i].inverse().compose(&gt.poses[j]);
            let est_rel = scaled[i].inverse().compose(&scaled[j]);
            let e = gt_rel.inverse().compose(&est_rel);
            t_len += e.translation.norm() / len;
            r_len += e.angle() / len;
            count += 1;
        }
        if count > 0 {
            per_length.push(LengthError {
                length: len,
                trans_err: 100.0 * t_len / count as f64,
                rot_err: 100.0 * (r_len / count as f64).to_degrees(),
                count,
            });
            t_sum += t_len;
            r_sum += r_len;
            total += count;
        }
    }
    if total == 0 {
        return Ok(RelErrors { trans_err: 0.0, rot_err: 0.0, per_length, empty: true, scale });
    }
    Ok(RelErrors {
        trans_err: 100.0 * t_sum / total as f64,
        rot_err: 100.0 * (r_sum / total as f64).to_degrees(),
        per_length,
        empty: false,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub kind: String,
    pub scale: f64,
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Similarity> for AlignmentReport {
    fn from(s: &Similarity) -> Self {
        let r = &s.rotation;
        Self {
            kind: "sim3".into(),
            scale: s.scale,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [s.translation.x, s.translation.y, s.translation.z],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    /// Meters.
    pub ate_rmse: f64,
    /// Percent; zero when `rel_available` is false.
    pub trans_err: f64,
    /// Degrees per 100 m.
    pub rot_err: f64,
    pub rel_available: bool,
    pub per_length: Vec<LengthError>,
    pub alignment: AlignmentReport,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory) -> Result<MetricsReport> {
    let sim = align_similarity(est, gt)?;
    let rel = kitti_rel_errors(est, gt)?;
    Ok(MetricsReport {
        frames: est.len(),
        ate_rmse: rmse_after(est, gt, &sim),
        trans_err: rel.trans_err,
        rot_err: rel.rot_err,
        rel_available: !rel.empty,
        per_length: rel.per_length,
        alignment: AlignmentReport::from(&sim),
    })
}

/// Top-down (x, z) plot of the ground truth and the aligned estimate.
pub fn trajectory_svg(est: &Trajectory, gt: &Trajectory, align: &Similarity) -> String {
    let est_pts: Vec<(f64, f64)> = est.positions().iter().map(|p| align.apply(p)).map(|p| (p.x, p.z)).collect();
    let gt_pts: Vec<(f64, f64)> = gt.positions().iter().map(|p| (p.x, p.z)).collect();
    let all = est_pts.iter().chain(&gt_pts);
    let (mut x0, mut x1, mut z0, mut z1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, z) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        z0 = z0.min(z);
        z1 = z1.max(z);
    }
    let span = (x1 - x0).max(z1 - z0).max(1e-9);
    let (size, pad) = (480.0, 20.0);
    let map = |(x, z): (f64, f64)| (pad + (x - x0) / span * size, pad + size - (z - z0) / span * size);
    let line = |pts: &[(f64, f64)], colour: &str| {
        let mut s = String::new();
        for &p in pts {
            let (u, v) = map(p);
            let _ = write!(s, "{u:.2},{v:.2} ");
        }
        format!("  <polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n", s.trim_end())
    };
    let dim = size + 2.0 * pad;
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{dim}\" height=\"{dim}\" viewBox=\"0 0 {dim} {dim}\">\n");
    svg.push_str(&format!("  <rect width=\"{dim}\" height=\"{dim}\" fill=\"white\"/>\n"));
    svg.push_str(&line(&gt_pts, "black"));
    svg.push_str(&line(&est_pts, "crimson"));
    svg.push_str("  <text x=\"24\" y=\"16\" font-size=\"12\">ground truth (black), estimate (red); x right, z up</text>\n");
    svg.push_str("</svg>\n");
    svg
}
