//! Reduced DepthNet and PoseNet, with ORB-query cross-attention fusion.

use crate::error::{invalid, Error, Result};
use crate::orb::{PoseVariant, ORB_CHANNELS};
use orbvo_autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;
/// Disparity = `DISP_SCALE * sigmoid + DISP_OFFSET` spans `[1/100, 1/0.1]`.
pub const DISP_SCALE: f64 = 1.0 / MIN_DEPTH - 1.0 / MAX_DEPTH;
pub const DISP_OFFSET: f64 = 1.0 / MAX_DEPTH;
pub const POSE_SCALE: f64 = 0.01;
pub const TOTAL_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: PoseVariant,
    /// Five stride-2 encoder stages.
    pub encoder_widths: Vec<usize>,
    /// Depth decoder widths from coarse to fine; the last runs at half resolution.
    pub decoder_widths: Vec<usize>,
    pub pose_decoder_width: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Initial bias of the disparity logit.
    pub disparity_bias: f64,
    /// Zero the last pose layer at initialization so every pose starts at identity.
    pub zero_pose_head: bool,
}

impl NetConfig {
    pub fn new(variant: PoseVariant) -> Self {
        Self {
            variant,
            encoder_widths: vec![16, 32, 64, 128, 256],
            decoder_widths: vec![128, 64, 32, 16, 8],
            pose_decoder_width: 128,
            embed_dim: 128,
            heads: 8,
            disparity_bias: -3.0,
            zero_pose_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() != 5 || self.decoder_widths.len() != 5 {
            return invalid("encoders and the depth decoder have exactly five stages");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return invalid(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        Ok(())
    }
}

fn conv_shapes(params: &mut Vec<(String, Vec<usize>, f64)>, name: &str, cin: usize, cout: usize, k: usize) {
    let bound = (6.0 / (cin * k * k) as f64).sqrt();
    params.push((format!("{name}.w"), vec![cout, cin, k, k], bound));
    params.push((format!("{name}.b"), vec![cout], 0.0));
}

fn linear_shapes(params: &mut Vec<(String, Vec<usize>, f64)>, name: &str, cin: usize, cout: usize) {
    let bound = (3.0 / cin as f64).sqrt();
    params.push((format!("{name}.w"), vec![cin, cout], bound));
    params.push((format!("{name}.b"), vec![cout], 0.0));
}

fn encoder_shapes(params: &mut Vec<(String, Vec<usize>, f64)>, prefix: &str, cin: usize, widths: &[usize]) {
    let mut c = cin;
    for (i, &w) in widths.iter().enumerate() {
        conv_shapes(params, &format!("{prefix}/s{i}/down"), c, w, 3);
        conv_shapes(params, &format!("{prefix}/s{i}/res"), w, w, 3);
        c = w;
    }
}

/// Parameter names, shapes and uniform init bounds, in a fixed order.
fn parameter_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, f64)> {
    let mut p = Vec::new();
    let ew = &cfg.encoder_widths;
    let dw = &cfg.decoder_widths;
    encoder_shapes(&mut p, "depth/enc", 3, ew);
    let mut c = ew[4];
    for i in 0..4 {
        conv_shapes(&mut p, &format!("depth/dec{i}/up"), c, dw[i], 3);
        conv_shapes(&mut p, &format!("depth/dec{i}/fuse"), dw[i] + ew[3 - i], dw[i], 3);
        c = dw[i];
    }
    conv_shapes(&mut p, "depth/dec4/up", c, dw[4], 3);
    conv_shapes(&mut p, "depth/head", dw[4], 1, 3);
    let deep = ew[4];
    let dec_in = match cfg.variant {
        PoseVariant::Concatenate => {
            encoder_shapes(&mut p, "pose/enc", 2 * (3 + ORB_CHANNELS), ew);
            deep
        }
        PoseVariant::Attention => {
            encoder_shapes(&mut p, "pose/rgb", 6, ew);
            encoder_shapes(&mut p, "pose/orb", 2 * ORB_CHANNELS, ew);
            for n in ["q", "k", "v"] {
                linear_shapes(&mut p, &format!("pose/attn/{n}"), deep, cfg.embed_dim);
            }
            linear_shapes(&mut p, "pose/attn/out", cfg.embed_dim, deep);
            2 * deep
        }
    };
    let pw = cfg.pose_decoder_width;
    conv_shapes(&mut p, "pose/dec0", dec_in, pw, 3);
    conv_shapes(&mut p, "pose/dec1", pw, pw, 3);
    conv_shapes(&mut p, "pose/head", pw, 6, 1);
    p
}

/// Seeded uniform initialization.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, bound) in parameter_layout(cfg) {
        let n: usize = shape.iter().product();
        let mut data: Vec<f32> = if bound > 0.0 {
            (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
        } else {
            vec![0.0; n]
        };
        if name == "depth/head.b" {
            data.fill(cfg.disparity_bias as f32);
        }
        if cfg.zero_pose_head && name.starts_with("pose/head") {
            data.fill(0.0);
        }
        store.insert(name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

fn param<T: Scalar>(g: &Graph<T>, p: &ParamStore<T>, name: &str) -> Result<Var> {
    let t = p.get(name).ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))?;
    Ok(g.param(name, t))
}

fn conv<T: Scalar>(g: &Graph<T>, p: &ParamStore<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = param(g, p, &format!("{name}.w"))?;
    let b = param(g, p, &format!("{name}.b"))?;
    let k = g.shape(w)[2];
    Ok(g.conv2d(x, w, Some(b), stride, k / 2)?)
}

fn conv_relu<T: Scalar>(g: &Graph<T>, p: &ParamStore<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    Ok(g.relu(conv(g, p, name, x, stride)?)?)
}

/// Features of the five stages, finest first.
fn encoder<T: Scalar>(g: &Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(5);
    let mut h = x;
    for i in 0..5 {
        let down = conv_relu(g, p, &format!("{prefix}/s{i}/down"), h, 2)?;
        let res = conv(g, p, &format!("{prefix}/s{i}/res"), down, 1)?;
        h = g.relu(g.add(down, res)?)?;
        feats.push(h);
    }
    Ok(feats)
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
        return Err(Error::Tensor(orbvo_autodiff::TensorError::Shape(format!(
            "image {w}x{h} must be a positive multiple of {TOTAL_STRIDE} in both dimensions"
        ))));
    }
    Ok(())
}

pub struct DepthOutput {
    /// `[n, 1, h, w]`.
    pub disparity: Var,
    pub depth: Var,
}

/// `images` is `[n, 3, h, w]`.
pub fn depth_forward<T: Scalar>(g: &Graph<T>, p: &ParamStore<T>, images: Var) -> Result<DepthOutput> {
    let s = g.shape(images);
    if s.len() != 4 || s[1] != 3 {
        return invalid(format!("DepthNet expects [n, 3, h, w], got {s:?}"));
    }
    check_dims(s[2], s[3])?;
    let f = encoder(g, p, "depth/enc", images)?;
    let mut x = f[4];
    for i in 0..4 {
        x = conv_relu(g, p, &format!("depth/dec{i}/up"), x, 1)?;
        x = g.upsample2x(x)?;
        x = g.concat(&[x, f[3 - i]], 1)?;
        x = conv_relu(g, p, &format!("depth/dec{i}/fuse"), x, 1)?;
    }
    x = conv_relu(g, p, "depth/dec4/up", x, 1)?;
    x = g.upsample2x(x)?;
    let logit = conv(g, p, "depth/head", x, 1)?;
    let sig = g.sigmoid(logit)?;
    let disparity = g.add_scalar(g.scale(sig, DISP_SCALE)?, DISP_OFFSET)?;
    let depth = g.recip(disparity)?;
    Ok(DepthOutput { disparity, depth })
}

/// Graph-side pose inputs, batched.
#[derive(Debug, Clone, Copy)]
pub enum PoseInputVars {
    Concatenate(Var),
    Attention { rgb: Var, orb: Var },
}

pub struct PoseOutput {
    /// `[b, 6]`: translation then axis-angle.
    pub pose: Var,
    /// `[b, heads, L, L]` for the attention variant.
    pub attention: Option<Var>,
}

pub struct AttentionOutput {
    /// Fused features, same shape as the key/value map.
    pub fused: Var,
    /// `[b, heads, L, L]`, rows indexed by query.
    pub weights: Var,
}

/// Multi-head scaled dot-product attention with queries from `q_feats` and
/// keys/values from `kv_feats`, both `[b, c, h, w]`.
pub fn cross_attention<T: Scalar>(
    g: &Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    q_feats: Var,
    kv_feats: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let qs = g.shape(q_feats);
    let ks = g.shape(kv_feats);
    if qs != ks {
        return Err(Error::Tensor(orbvo_autodiff::TensorError::Shape(format!(
            "attention maps differ: {qs:?} vs {ks:?}"
        ))));
    }
    let (b, c, h, w) = (qs[0], qs[1], qs[2], qs[3]);
    let l = h * w;
    let seq = |x: Var| -> Result<Var> { Ok(g.permute(g.reshape(x, &[b, c, l])?, &[0, 2, 1])?) };
    let linear = |x: Var, name: &str| -> Result<Var> {
        let wt = param(g, p, &format!("{prefix}/{name}.w"))?;
        let bias = param(g, p, &format!("{prefix}/{name}.b"))?;
        Ok(g.add(g.matmul(x, wt)?, bias)?)
    };
    let qseq = seq(q_feats)?;
    let kvseq = seq(kv_feats)?;
    let q = linear(qseq, "q")?;
    let k = linear(kvseq, "k")?;
    let v = linear(kvseq, "v")?;
    let embed = g.shape(q)[2];
    let dh = embed / heads;
    let split = |x: Var, perm: &[usize], shape: &[usize]| -> Result<Var> {
        Ok(g.reshape(g.permute(g.reshape(x, &[b, l, heads, dh])?, perm)?, shape)?)
    };
    let qh = split(q, &[0, 2, 1, 3], &[b * heads, l, dh])?;
    let kt = split(k, &[0, 2, 3, 1], &[b * heads, dh, l])?;
    let vh = split(v, &[0, 2, 1, 3], &[b * heads, l, dh])?;
    let logits = g.scale(g.matmul(qh, kt)?, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(logits, 2)?;
    let out = g.matmul(attn, vh)?;
    let out = g.reshape(g.permute(g.reshape(out, &[b, heads, l, dh])?, &[0, 2, 1, 3])?, &[b, l, embed])?;
    let out = linear(out, "out")?;
    let fused = g.reshape(g.permute(out, &[0, 2, 1])?, &[b, c, h, w])?;
    let weights = g.reshape(attn, &[b, heads, l, l])?;
    Ok(AttentionOutput { fused, weights })
}

pub fn pose_forward<T: Scalar>(g: &Graph<T>, p: &ParamStore<T>, cfg: &NetConfig, inputs: PoseInputVars) -> Result<PoseOutput> {
    let (feats, attention) = match (cfg.variant, inputs) {
        (PoseVariant::Concatenate, PoseInputVars::Concatenate(x)) => {
            let s = g.shape(x);
            if s.len() != 4 || s[1] != 2 * (3 + ORB_CHANNELS) {
                return invalid(format!("concatenate PoseNet expects 72 channels, got {s:?}"));
            }
            check_dims(s[2], s[3])?;
            (encoder(g, p, "pose/enc", x)?[4], None)
        }
        (PoseVariant::Attention, PoseInputVars::Attention { rgb, orb }) => {
            let (rs, os) = (g.shape(rgb), g.shape(orb));
            if rs.len() != 4 || os.len() != 4 || rs[1] != 6 || os[1] != 2 * ORB_CHANNELS || rs[2..] != os[2..] {
                return invalid(format!("attention PoseNet expects 6 + 66 channels, got {rs:?} and {os:?}"));
            }
            check_dims(rs[2], rs[3])?;
            let rgb_f = encoder(g, p, "pose/rgb", rgb)?[4];
            let orb_f = encoder(g, p, "pose/orb", orb)?[4];
            let att = cross_attention(g, p, "pose/attn", orb_f, rgb_f, cfg.heads)?;
            (g.concat(&[att.fused, rgb_f], 1)?, Some(att.weights))
        }
        _ => return invalid("pose inputs do not match the network variant"),
    };
    let x = conv_relu(g, p, "pose/dec0", feats, 1)?;
    let x = conv_relu(g, p, "pose/dec1", x, 1)?;
    let x = conv(g, p, "pose/head", x, 1)?;
    let x = g.mean_axis(g.mean_axis(x, 3)?, 2)?;
    let b = g.shape(x)[0];
    let pose = g.scale(g.reshape(x, &[b, 6])?, POSE_SCALE)?;
    Ok(PoseOutput { pose, attention })
}

/// Head selection for [`reduce_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Mean,
    Head(usize),
}

pub struct AttentionHeatmap {
    /// `(H/32) x (W/32)` row-major grid after min-max normalization.
    pub grid: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `H x W` bilinear upsampling of the grid.
    pub heatmap: Vec<f64>,
}

/// Reduces one item's `[heads, L, L]` attention weights to an image-sized
/// heatmap: head average, transpose, mean over the last axis, reshape to the
/// stride-32 grid, min-max normalize (a constant grid maps to 0), resize.
pub fn reduce_attention(weights: &[f64], heads: usize, width: usize, height: usize, select: HeadSelect) -> Result<AttentionHeatmap> {
    let (rows, cols) = (height / TOTAL_STRIDE, width / TOTAL_STRIDE);
    let l = rows * cols;
    if heads == 0 || l == 0 || weights.len() != heads * l * l {
        return Err(Error::Tensor(orbvo_autodiff::TensorError::Shape(format!(
            "{} weights do not form {heads} heads of {l}x{l} for {width}x{height}",
            weights.len()
        ))));
    }
    let head_range = match select {
        HeadSelect::Mean => 0..heads,
        HeadSelect::Head(hd) if hd < heads => hd..hd + 1,
        HeadSelect::Head(hd) => return invalid(format!("head {hd} out of range 0..{heads}")),
    };
    let nh = head_range.len() as f64;
    let mut m = vec![0.0; l * l];
    for hd in head_range {
        for (acc, w) in m.iter_mut().zip(&weights[hd * l * l..(hd + 1) * l * l]) {
            *acc += w / nh;
        }
    }
    // Transposed row j is column j of m; average it over queries i.
    let mut grid: Vec<f64> = (0..l).map(|j| (0..l).map(|i| m[i * l + j]).sum::<f64>() / l as f64).collect();
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut grid {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
    }
    let cell = |r: isize, c: isize| grid[r.clamp(0, rows as isize - 1) as usize * cols + c.clamp(0, cols as isize - 1) as usize];
    let mut heatmap = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = ((y as f64 + 0.5) / TOTAL_STRIDE as f64 - 0.5).clamp(0.0, (rows - 1) as f64);
        let (y0, fy) = (gy.floor() as isize, gy.fract());
        for x in 0..width {
            let gx = ((x as f64 + 0.5) / TOTAL_STRIDE as f64 - 0.5).clamp(0.0, (cols - 1) as f64);
            let (x0, fx) = (gx.floor() as isize, gx.fract());
            let top = cell(y0, x0) * (1.0 - fx) + cell(y0, x0 + 1) * fx;
            let bot = cell(y0 + 1, x0) * (1.0 - fx) + cell(y0 + 1, x0 + 1) * fx;
            heatmap.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(AttentionHeatmap { grid, grid_rows: rows, grid_cols: cols, heatmap })
}
