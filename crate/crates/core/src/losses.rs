//! Photometric, geometric-consistency and edge-aware smoothness losses.

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::warp::inverse_warp;
use orbvo_autodiff::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Weight of the L1 term against the SSIM term.
pub const LAMBDA: f64 = 0.15;
/// Weight of the geometric term during adaptation.
pub const ALPHA: f64 = 0.5;
const SMOOTH_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub geometric: f64,
    pub smoothness: f64,
}

impl LossWeights {
    pub const TRAINING: LossWeights = LossWeights { geometric: 0.5, smoothness: 0.1 };
    pub const ADAPTATION: LossWeights = LossWeights { geometric: ALPHA, smoothness: 0.0 };
}

/// Per-pixel SSIM `[b, 1, h, w]` of two `[b, c, h, w]` images, averaged over
/// channels, using 3x3 box statistics.
pub fn ssim_map<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::InvalidInput(format!("ssim: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let mu_a = g.avg_pool3(a)?;
    let mu_b = g.avg_pool3(b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let sig_a = g.sub(g.avg_pool3(aa)?, mu_aa)?;
    let sig_b = g.sub(g.avg_pool3(bb)?, mu_bb)?;
    let sig_ab = g.sub(g.avg_pool3(ab)?, mu_ab)?;
    let num_l = g.add_scalar(g.scale(mu_ab, 2.0)?, SSIM_C1)?;
    let num_c = g.add_scalar(g.scale(sig_ab, 2.0)?, SSIM_C2)?;
    let den_l = g.add_scalar(g.add(mu_aa, mu_bb)?, SSIM_C1)?;
    let den_c = g.add_scalar(g.add(sig_a, sig_b)?, SSIM_C2)?;
    let num = g.mul(num_l, num_c)?;
    let den = g.mul(den_l, den_c)?;
    let s = g.div(num, den)?;
    Ok(g.mean_axis(s, 1)?)
}

/// Mean over masked pixels of a `[b, 1, h, w]` map, taken per batch item and
/// then averaged over items.
fn masked_mean<T: Scalar>(g: &Graph<T>, map: Var, mask: &Tensor<T>, what: &str) -> Result<Var> {
    let b = mask.shape()[0];
    let per = mask.numel() / b;
    let mut inv = Vec::with_capacity(b);
    for item in mask.data().chunks(per) {
        let n = item.iter().filter(|&&m| m != T::zero()).count();
        if n == 0 {
            return Err(Error::DegenerateSupervision(format!("{what}: empty mask")));
        }
        inv.push(1.0 / n as f64);
    }
    let m = g.constant(mask.clone());
    let masked = g.reshape(g.mul(map, m)?, &[b, per])?;
    let sums = g.sum_axis(masked, 1)?;
    let w = g.constant(Tensor::from_f64(&g.shape(sums), &inv)?);
    Ok(g.mean(g.mul(sums, w)?)?)
}

/// Per-pixel photometric error `lambda L1 + (1 - lambda)(1 - SSIM)/2`,
/// `[b, 1, h, w]`. Both images are multiplied by the mask first so pixels
/// outside it cannot influence the SSIM windows of pixels inside.
pub fn photometric_map<T: Scalar>(g: &Graph<T>, target: Var, synth: Var, mask: &Tensor<T>) -> Result<Var> {
    let m = g.constant(mask.clone());
    let t = g.mul(target, m)?;
    let s = g.mul(synth, m)?;
    let diff = g.sub(t, s)?;
    let l1 = g.mean_axis(g.abs(diff)?, 1)?;
    let ssim = ssim_map(g, t, s)?;
    let dssim = g.scale(g.add_scalar(g.neg(ssim)?, 1.0)?, 0.5)?;
    Ok(g.add(g.scale(l1, LAMBDA)?, g.scale(dssim, 1.0 - LAMBDA)?)?)
}

pub fn photometric_loss<T: Scalar>(g: &Graph<T>, target: Var, synth: Var, mask: &Tensor<T>) -> Result<Var> {
    let map = photometric_map(g, target, synth, mask)?;
    masked_mean(g, map, mask, "photometric")
}

/// Mean over masked pixels of `|d1 - d2| / (d1 + d2)`. Masked-out pixels are
/// replaced by 1 in both maps so they contribute nothing.
pub fn geometric_loss<T: Scalar>(g: &Graph<T>, d1: Var, d2: Var, mask: &Tensor<T>) -> Result<Var> {
    let m = g.constant(mask.clone());
    let fill = g.constant(mask.map(|v| T::one() - v));
    let a = g.add(g.mul(d1, m)?, fill)?;
    let b = g.add(g.mul(d2, m)?, fill)?;
    let ratio = g.div(g.abs(g.sub(a, b)?)?, g.add(a, b)?)?;
    masked_mean(g, ratio, mask, "geometric")
}

/// Edge-aware first-order smoothness of mean-normalized disparity `[b, 1, h, w]`
/// against image `[b, c, h, w]`.
pub fn smoothness_loss<T: Scalar>(g: &Graph<T>, disp: Var, image: Var) -> Result<Var> {
    let s = g.shape(disp);
    let (h, w) = (s[2], s[3]);
    let mean = g.mean_axis(g.mean_axis(disp, 3)?, 2)?;
    let norm = g.div(disp, g.add_scalar(mean, SMOOTH_EPS)?)?;
    let grad = |x: Var, axis: usize, len: usize| -> Result<Var> {
        let fwd = g.narrow(x, axis, 1, len - 1)?;
        let back = g.narrow(x, axis, 0, len - 1)?;
        Ok(g.abs(g.sub(fwd, back)?)?)
    };
    let term = |axis: usize, len: usize| -> Result<Var> {
        let dd = grad(norm, axis, len)?;
        let di = g.mean_axis(grad(image, axis, len)?, 1)?;
        let weight = g.exp(g.neg(di)?)?;
        Ok(g.mean(g.mul(dd, weight)?)?)
    };
    Ok(g.add(term(3, w)?, term(2, h)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub lp: f64,
    pub lc: f64,
    pub ls: f64,
    pub total: f64,
    pub valid: usize,
}

/// Loss terms as graph nodes plus their values.
pub struct LossBundle {
    pub photometric: Var,
    pub geometric: Var,
    pub smoothness: Option<Var>,
    pub total: Var,
    pub values: LossValues,
}

/// Per-frame predictions feeding [`snippet_loss`].
pub struct SnippetVars {
    /// `[n, 3, h, w]`, frames in order.
    pub images: Var,
    /// `[n, 1, h, w]`.
    pub depths: Var,
    /// `[n, 1, h, w]`; only used for smoothness.
    pub disparities: Option<Var>,
    /// `[2 (n - 1), 6]`: rows `2i` and `2i+1` hold the poses mapping frame
    /// `i` into `i+1` and frame `i+1` into `i`.
    pub poses: Var,
}

/// Self-supervised error of a snippet. Every adjacent pair is warped in both
/// directions; photometric and geometric terms are averaged over the
/// `2 (n - 1)` directed pairs, smoothness over frames.
pub fn snippet_loss<T: Scalar>(g: &Graph<T>, v: &SnippetVars, k: &CameraIntrinsics, weights: LossWeights) -> Result<LossBundle> {
    let n = g.shape(v.images)[0];
    if n < 2 {
        return Err(Error::InvalidInput("a snippet needs at least two frames".into()));
    }
    // Batch the directed pairs: targets t_j, sources s_j.
    let mut tgt_idx = Vec::new();
    let mut src_idx = Vec::new();
    for i in 0..n - 1 {
        tgt_idx.extend([i, i + 1]);
        src_idx.extend([i + 1, i]);
    }
    let gather = |x: Var, idx: &[usize]| -> Result<Var> {
        let parts: Vec<Var> = idx.iter().map(|&i| g.narrow(x, 0, i, 1)).collect::<std::result::Result<_, _>>()?;
        Ok(g.concat(&parts, 0)?)
    };
    let tgt_img = gather(v.images, &tgt_idx)?;
    let src_img = gather(v.images, &src_idx)?;
    let tgt_depth = gather(v.depths, &tgt_idx)?;
    let src_depth = gather(v.depths, &src_idx)?;
    let warp = inverse_warp(g, src_img, Some(src_depth), tgt_depth, v.poses, k)?;
    let lp = photometric_loss(g, tgt_img, warp.synthesized, &warp.mask)?;
    let sampled = warp.sampled_depth.expect("source depth supplied");
    let lc = geometric_loss(g, warp.proj_depth, sampled, &warp.mask)?;
    let mut total = g.add(lp, g.scale(lc, weights.geometric)?)?;
    let mut ls = None;
    if weights.smoothness != 0.0 {
        let disp = v
            .disparities
            .ok_or_else(|| Error::InvalidInput("smoothness weight set without disparities".into()))?;
        let s = smoothness_loss(g, disp, v.images)?;
        total = g.add(total, g.scale(s, weights.smoothness)?)?;
        ls = Some(s);
    }
    let values = LossValues {
        lp: g.item(lp).as_f64(),
        lc: g.item(lc).as_f64(),
        ls: ls.map_or(0.0, |s| g.item(s).as_f64()),
        total: g.item(total).as_f64(),
        valid: warp.valid_count(),
    };
    Ok(LossBundle { photometric: lp, geometric: lc, smoothness: ls, total, values })
}
