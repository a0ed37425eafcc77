//! Pinhole camera, rigid transforms and point projection.

use crate::error::{invalid, Result};
use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) || fx <= 0.0 || fy <= 0.0 {
            return invalid(format!("bad intrinsics fx={fx} fy={fy} cx={cx} cy={cy}"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Default camera for synthetic scenes: 90% of the width as focal length,
    /// principal point at the image centre.
    pub fn for_size(width: usize, height: usize) -> Self {
        let f = 0.9 * width as f64;
        Self { fx: f, fy: f, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Ray through pixel `(u, v)` with unit z.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Translation and axis-angle rotation `(tx, ty, tz, rx, ry, rz)`.
pub type PoseVector6 = [f64; 6];

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Rotation from the axis-angle part, translation taken as given.
    pub fn exp(v: &PoseVector6) -> Self {
        let r = Vector3::new(v[3], v[4], v[5]);
        Self {
            rotation: rotation_exp(&r),
            translation: Vector3::new(v[0], v[1], v[2]),
        }
    }

    pub fn log(&self) -> PoseVector6 {
        let r = Rotation3::from_matrix_unchecked(self.rotation).scaled_axis();
        let t = self.translation;
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Se3Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major upper 3x4 block.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major_3x4(m: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        (((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
    }
}

/// Rodrigues' formula, with a second-order series below 1e-8 rad.
pub fn rotation_exp(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let k = r.cross_matrix();
    let k2 = k * k;
    let (a, b) = if theta < 1e-8 {
        (1.0, 0.5)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + k * a + k2 * b
}

pub const BEHIND_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Depth of the transformed point in the target frame.
    pub z: f64,
    pub behind: bool,
}

/// Back-projects pixel `(u, v)` at `depth`, applies `t`, and re-projects.
pub fn project(u: f64, v: f64, depth: f64, t: &Se3Pose, k: &CameraIntrinsics) -> Projection {
    let p = t.transform(&(k.unproject(u, v) * depth));
    if p.z <= BEHIND_EPS {
        return Projection { u: f64::NAN, v: f64::NAN, z: p.z, behind: true };
    }
    let (pu, pv) = k.project(&p);
    Projection { u: pu, v: pv, z: p.z, behind: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(Se3Pose::exp(&[0.0; 6]), Se3Pose::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = Se3Pose::exp(&[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]);
        let x = t.transform(&Vector3::x());
        assert!((x - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            axis = axis.normalize() * 0.3;
            let v = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), axis.x, axis.y, axis.z];
            let back = Se3Pose::exp(&v).log();
            let err = v.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
            let t = Se3Pose::exp(&v);
            let r = t.rotation;
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn small_angle_series_is_continuous() {
        for theta in [0.99e-8, 1.01e-8, 1e-3] {
            let r = rotation_exp(&Vector3::new(0.0, 0.0, theta));
            let exact = Matrix3::new(theta.cos(), -theta.sin(), 0.0, theta.sin(), theta.cos(), 0.0, 0.0, 0.0, 1.0);
            assert!((r - exact).norm() < 1e-15);
        }
    }

    #[test]
    fn inverse_and_compose() {
        let t = Se3Pose::exp(&[0.3, -0.1, 0.5, 0.1, 0.2, -0.3]);
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-12 && id.translation.norm() < 1e-12);
    }

    #[test]
    fn projection_closed_forms() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap();
        let p = project(10.0, 20.0, 7.0, &Se3Pose::identity(), &k);
        assert!((p.u - 10.0).abs() < 1e-12 && (p.v - 20.0).abs() < 1e-12 && (p.z - 7.0).abs() < 1e-12);
        let p = project(32.0, 32.0, 10.0, &Se3Pose::exp(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &k);
        assert!((p.u - 42.0).abs() < 1e-12);
        let p = project(32.0, 32.0, 10.0, &Se3Pose::exp(&[0.0, 0.0, -1.0, 0.0, 0.0, 0.0]), &k);
        assert!((p.z - 9.0).abs() < 1e-12);
        let p = project(32.0, 32.0, 10.0, &Se3Pose::exp(&[0.0, 0.0, -10.0, 0.0, 0.0, 0.0]), &k);
        assert!(p.behind);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, f64::NAN, 0.0, 0.0).is_err());
    }
}
