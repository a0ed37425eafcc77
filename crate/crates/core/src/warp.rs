//! Differentiable inverse warping: target depth plus relative pose select
//! where each target pixel samples the source image and source depth.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Se3Pose, BEHIND_EPS};
use crate::image::Image;
use orbvo_autodiff::{Graph, Scalar, Tensor, Var};

/// Fewer valid pixels than this fraction makes the supervision useless.
pub const MIN_VALID_FRACTION: f64 = 0.05;

pub struct WarpOutput<T: Scalar> {
    /// Source image sampled at the projected coordinates, `[b, c, h, w]`.
    pub synthesized: Var,
    /// `[b, 1, h, w]`: in bounds and in front of the camera.
    pub mask: Tensor<T>,
    /// Projected pixel coordinates `[b, 2, h, w]`, x then y.
    pub coords: Var,
    /// Depth of each transformed target point in the source frame, `[b, 1, h, w]`.
    pub proj_depth: Var,
    /// Source depth interpolated at the projected coordinates, when given.
    pub sampled_depth: Option<Var>,
}

impl<T: Scalar> WarpOutput<T> {
    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != T::zero()).count()
    }
}

/// Homogeneous rays `K^-1 [u v 1]^T` for every pixel, `[3, h*w]`.
pub fn pixel_rays<T: Scalar>(k: &CameraIntrinsics, width: usize, height: usize) -> Tensor<T> {
    let n = width * height;
    let mut data = vec![T::zero(); 3 * n];
    for y in 0..height {
        for x in 0..width {
            let r = k.unproject(x as f64, y as f64);
            let p = y * width + x;
            data[p] = T::from_f64(r.x);
            data[n + p] = T::from_f64(r.y);
            data[2 * n + p] = T::one();
        }
    }
    Tensor::new(&[3, n], data).expect("sized above")
}

/// Synthesizes the target view from `src_img` `[b, c, h, w]`. `pose` is
/// `[b, 6]` (translation then axis-angle) mapping target-frame points into
/// the source frame; `tgt_depth` is `[b, 1, h, w]`.
pub fn inverse_warp<T: Scalar>(
    g: &Graph<T>,
    src_img: Var,
    src_depth: Option<Var>,
    tgt_depth: Var,
    pose: Var,
    k: &CameraIntrinsics,
) -> Result<WarpOutput<T>> {
    let ds = g.shape(tgt_depth);
    let (b, h, w) = (ds[0], ds[2], ds[3]);
    let n = h * w;
    let rays = g.constant(pixel_rays::<T>(k, w, h));
    let d = g.reshape(tgt_depth, &[b, 1, n])?;
    let pts = g.mul(d, rays)?;
    let rvec = g.narrow(pose, 1, 3, 3)?;
    let rot = g.rodrigues(rvec)?;
    let tvec = g.narrow(pose, 1, 0, 3)?;
    let tvec = g.reshape(tvec, &[b, 3, 1])?;
    let moved = g.matmul(rot, pts)?;
    let moved = g.add(moved, tvec)?;
    let z = g.narrow(moved, 1, 2, 1)?;
    let keep = g.with_value(z, |zv| zv.map(|v| if v.as_f64() > BEHIND_EPS { T::one() } else { T::zero() }));
    let keep = keep.reshape(&[b, 1, h, w])?;
    let zc = g.clamp(z, BEHIND_EPS, f64::INFINITY)?;
    let xy = g.narrow(moved, 1, 0, 2)?;
    let norm = g.div(xy, zc)?;
    let focal = g.constant(Tensor::from_f64(&[2, 1], &[k.fx, k.fy])?);
    let centre = g.constant(Tensor::from_f64(&[2, 1], &[k.cx, k.cy])?);
    let pix = g.mul(norm, focal)?;
    let pix = g.add(pix, centre)?;
    let coords = g.reshape(pix, &[b, 2, h, w])?;
    let (synthesized, mask) = g.bilinear_sample(src_img, coords, Some(&keep))?;
    let sampled_depth = match src_depth {
        Some(sd) => Some(g.bilinear_sample(sd, coords, Some(&keep))?.0),
        None => None,
    };
    let proj_depth = g.reshape(z, &[b, 1, h, w])?;
    for item in mask.data().chunks(n) {
        let valid = item.iter().filter(|&&m| m != T::zero()).count();
        if (valid as f64) < MIN_VALID_FRACTION * n as f64 {
            return Err(Error::DegenerateWarp { valid, total: n });
        }
    }
    Ok(WarpOutput { synthesized, mask, coords, proj_depth, sampled_depth })
}

/// Pose vector of a transform as a `[1, 6]` tensor.
pub fn pose_tensor<T: Scalar>(t: &Se3Pose) -> Tensor<T> {
    Tensor::from_f64(&[1, 6], &t.log()).expect("six values")
}

/// Non-differentiable view synthesis at 64-bit precision.
pub struct SynthesizedView {
    pub image: Image,
    pub mask: Vec<bool>,
    /// Per-pixel `(x, y)` coordinates in the source image.
    pub coords: Vec<(f64, f64)>,
    /// Transformed target depth in the source frame.
    pub proj_depth: Vec<f64>,
    /// Source depth interpolated at `coords` (zero where invalid).
    pub sampled_depth: Option<Vec<f64>>,
}

pub fn synthesize_view(
    src: &Image,
    src_depth: Option<&[f32]>,
    tgt_depth: &[f32],
    t_tgt_src: &Se3Pose,
    k: &CameraIntrinsics,
) -> Result<SynthesizedView> {
    let (w, h) = (src.width, src.height);
    if tgt_depth.len() != w * h || src_depth.is_some_and(|d| d.len() != w * h) {
        return Err(Error::InvalidInput("depth map does not match the image".into()));
    }
    let g = Graph::<f64>::unchecked();
    let img = g.constant(src.to_tensor().cast());
    let dt = g.constant(Tensor::<f32>::new(&[1, 1, h, w], tgt_depth.to_vec())?.cast());
    let ds = match src_depth {
        Some(d) => Some(g.constant(Tensor::<f32>::new(&[1, 1, h, w], d.to_vec())?.cast())),
        None => None,
    };
    let pose = g.constant(pose_tensor(t_tgt_src));
    let out = inverse_warp(&g, img, ds, dt, pose, k)?;
    let syn = g.value(out.synthesized);
    let coords = g.value(out.coords);
    let n = w * h;
    Ok(SynthesizedView {
        image: Image::new(src.channels, w, h, syn.data().iter().map(|&v| v as f32).collect())?,
        mask: out.mask.data().iter().map(|&m| m != 0.0).collect(),
        coords: (0..n).map(|p| (coords.data()[p], coords.data()[n + p])).collect(),
        proj_depth: g.value(out.proj_depth).data().to_vec(),
        sampled_depth: out.sampled_depth.map(|v| g.value(v).data().to_vec()),
    })
}
