//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod metric_checks;
pub mod model_checks;
pub mod warp_checks;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector3};
use orbvo::geometry::Se3Pose;
use orbvo::image::GrayImage;
use orbvo::orb::{build_pyramid, Corner, OrbParams};
use orbvo_autodiff::fd::{central_partial, rel_err};
use orbvo_autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- images

/// Piecewise-constant rectangles over pixel noise: plenty of corners.
pub fn blocky_image(seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.3..0.5)).collect();
    for _ in 0..24 {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (bw, bh) = (rng.random_range(3..w / 3), rng.random_range(3..h / 3));
        let val: f32 = rng.random_range(0.0..1.0);
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                v[y * w + x] = val;
            }
        }
    }
    for p in v.iter_mut() {
        *p = (*p + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    GrayImage::new(w, h, v).unwrap()
}

/// Smooth texture: bilinear value noise over a coarse grid plus a finer octave.
pub fn smooth_texture(seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let octave = |rng: &mut ChaCha8Rng, cell: f64| {
        let (gw, gh) = ((w as f64 / cell) as usize + 2, (h as f64 / cell) as usize + 2);
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect();
        move |x: f64, y: f64| {
            let (gx, gy) = (x / cell, y / cell);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let g = |i: usize, j: usize| grid[j * gw + i];
            (1.0 - fy) * ((1.0 - fx) * g(x0, y0) + fx * g(x0 + 1, y0)) + fy * ((1.0 - fx) * g(x0, y0 + 1) + fx * g(x0 + 1, y0 + 1))
        }
    };
    let coarse = octave(&mut rng, 7.0);
    let fine = octave(&mut rng, 3.0);
    GrayImage::from_fn(w, h, |x, y| (0.7 * coarse(x as f64, y as f64) + 0.3 * fine(x as f64, y as f64)) as f32)
}

/// `out(v) = img(c + R(-theta) (v - c))` with bilinear sampling, zero outside.
pub fn rotate_about_centre(img: &GrayImage, theta: f64) -> GrayImage {
    let (cx, cy) = ((img.width / 2) as f64, (img.height / 2) as f64);
    let (s, c) = theta.sin_cos();
    GrayImage::from_fn(img.width, img.height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let (sx, sy) = (cx + c * dx + s * dy, cy - s * dx + c * dy);
        let (x0, y0) = (sx.floor(), sy.floor());
        if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 >= img.width as f64 || y0 + 1.0 >= img.height as f64 {
            return 0.0;
        }
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let p = |x: usize, y: usize| img.at(x, y) as f64;
        ((1.0 - fy) * ((1.0 - fx) * p(x0, y0) + fx * p(x0 + 1, y0)) + fy * ((1.0 - fx) * p(x0, y0 + 1) + fx * p(x0 + 1, y0 + 1))) as f32
    })
}

// ---------------------------------------------------------------- ORB oracles

/// Bresenham circle of radius 3 in circular order.
const CIRCLE: [(isize, isize); 16] = [
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
];

/// Per-pixel segment test over every arc start and both polarities, then a
/// window scan for suppression. Equal scores go to the earlier raster pixel.
pub fn brute_fast(img: &GrayImage, t: f32, r: usize) -> Vec<Corner> {
    let (w, h) = (img.width, img.height);
    let mut score = vec![0f32; w * h];
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let c = img.at(x, y);
            let ring: Vec<f32> = CIRCLE
                .iter()
                .map(|&(dx, dy)| img.at((x as isize + dx) as usize, (y as isize + dy) as usize))
                .collect();
            let mut best: Option<f32> = None;
            for start in 0..16 {
                let arc: Vec<usize> = (0..9).map(|j| (start + j) % 16).collect();
                let bright = arc.iter().all(|&k| ring[k] > c + t);
                let dark = arc.iter().all(|&k| ring[k] < c - t);
                if bright || dark {
                    let m = arc.iter().map(|&k| (ring[k] - c).abs()).fold(f32::INFINITY, f32::min);
                    best = Some(best.map_or(m, |b| b.max(m)));
                }
            }
            if let Some(b) = best {
                score[y * w + x] = b;
            }
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = score[y * w + x];
            if s <= 0.0 {
                continue;
            }
            let mut keep = true;
            for qy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for qx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    let q = score[qy * w + qx];
                    if (qx, qy) == (x, y) || q <= 0.0 {
                        continue;
                    }
                    let earlier = qy < y || (qy == y && qx < x);
                    if q > s || (q == s && earlier) {
                        keep = false;
                    }
                }
            }
            if keep {
                out.push(Corner { x, y, score: s });
            }
        }
    }
    out
}

/// Unnormalized Sobel structure tensor response; equals the library score
/// times 8^4.
pub fn raw_harris(img: &GrayImage, x: usize, y: usize, block: usize) -> f64 {
    let p = |x: usize, y: usize| img.at(x, y) as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for py in y - block..=y + block {
        for px in x - block..=x + block {
            let gx = p(px + 1, py - 1) + 2.0 * p(px + 1, py) + p(px + 1, py + 1) - p(px - 1, py - 1) - 2.0 * p(px - 1, py) - p(px - 1, py + 1);
            let gy = p(px - 1, py + 1) + 2.0 * p(px, py + 1) + p(px + 1, py + 1) - p(px - 1, py - 1) - 2.0 * p(px, py - 1) - p(px + 1, py - 1);
            a += gx * gx;
            b += gx * gy;
            c += gy * gy;
        }
    }
    a * c - b * b - 0.04 * (a + c) * (a + c)
}

/// Candidate `(level, x, y, response)` sorted by every detection on every
/// level, best first.
pub fn exhaustive_ranking(img: &GrayImage, params: &OrbParams, margin: usize) -> Vec<(usize, usize, usize, f64)> {
    let pyr = build_pyramid(img, params.scale_factor, params.levels).unwrap();
    let mut all = Vec::new();
    for (level, lvl) in pyr.iter().enumerate() {
        for c in brute_fast(lvl, params.fast_threshold, params.nms_radius) {
            if c.x < margin || c.y < margin || c.x + margin >= lvl.width || c.y + margin >= lvl.height {
                continue;
            }
            all.push((level, c.x, c.y, raw_harris(lvl, c.x, c.y, 3) / 4096.0));
        }
    }
    all.sort_by(|a, b| b.3.total_cmp(&a.3).then((a.0, a.2, a.1).cmp(&(b.0, b.2, b.1))));
    all
}

// ---------------------------------------------------------------- metrics oracles

/// Horn's closed-form absolute orientation via the unit quaternion of the
/// largest eigenvalue, then least-squares scale and translation.
pub fn horn_similarity(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = est.len() as f64;
    let me: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let mg: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
    let mut m = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        m += (e - me) * (g - mg).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let imax = (0..4).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
    let q = eig.eigenvectors.column(imax);
    let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    let r = *rot.to_rotation_matrix().matrix();
    let num: f64 = est.iter().zip(gt).map(|(e, g)| (g - mg).dot(&(r * (e - me)))).sum();
    let den: f64 = est.iter().map(|e| (e - me).norm_squared()).sum();
    let s = num / den;
    (s, r, mg - s * r * me)
}

pub fn brute_ate(est: &[Se3Pose], gt: &[Se3Pose]) -> f64 {
    let e: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    let gp: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    let (s, r, t) = horn_similarity(&e, &gp);
    let sq: f64 = e.iter().zip(&gp).map(|(x, y)| (s * r * x + t - y).norm_squared()).sum();
    (sq / e.len() as f64).sqrt()
}

fn mat4(p: &Se3Pose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
    m
}

/// Direct KITTI protocol on 4x4 matrices: every start frame, lengths
/// 100..800 m, end frame = first frame farther than the length along the
/// ground-truth path. Returns (percent, degrees per 100 m, subsequences).
pub fn brute_rel_errors(est: &[Se3Pose], gt: &[Se3Pose]) -> (f64, f64, usize) {
    let e: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    let gp: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    let (s, _, _) = horn_similarity(&e, &gp);
    let est_m: Vec<Matrix4<f64>> = est
        .iter()
        .map(|p| {
            let mut m = mat4(p);
            for i in 0..3 {
                m[(i, 3)] *= s;
            }
            m
        })
        .collect();
    let gt_m: Vec<Matrix4<f64>> = gt.iter().map(mat4).collect();
    let mut dist = vec![0.0];
    for i in 1..gt.len() {
        dist.push(dist[i - 1] + (gp[i] - gp[i - 1]).norm());
    }
    let (mut t_sum, mut r_sum, mut n) = (0.0, 0.0, 0usize);
    for len in [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0] {
        for i in 0..gt.len() {
            let mut end = None;
            for j in i..gt.len() {
                if dist[j] > dist[i] + len {
                    end = Some(j);
                    break;
                }
            }
            let Some(j) = end else { continue };
            let dg = gt_m[i].try_inverse().unwrap() * gt_m[j];
            let de = est_m[i].try_inverse().unwrap() * est_m[j];
            let err = dg.try_inverse().unwrap() * de;
            let tr = err[(0, 0)] + err[(1, 1)] + err[(2, 2)];
            let angle = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            let dt = Vector3::new(err[(0, 3)], err[(1, 3)], err[(2, 3)]).norm();
            t_sum += dt / len;
            r_sum += angle / len;
            n += 1;
        }
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    (100.0 * t_sum / n as f64, 100.0 * (r_sum / n as f64).to_degrees(), n)
}

pub fn random_pose(rng: &mut ChaCha8Rng, t_scale: f64, r_scale: f64) -> Se3Pose {
    let v: [f64; 6] = std::array::from_fn(|i| rng.random_range(-1.0..1.0) * if i < 3 { t_scale } else { r_scale });
    Se3Pose::exp(&v)
}

/// Wandering ground-truth path of `n` frames with roughly `step` metres per
/// frame, plus an estimate with drifting noise.
pub fn crafted_pair(seed: u64, n: usize, step: f64) -> (Vec<Se3Pose>, Vec<Se3Pose>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt = vec![Se3Pose::identity()];
    let mut est = vec![Se3Pose::identity()];
    for _ in 1..n {
        let mv = Se3Pose::exp(&[
            rng.random_range(-0.2..0.2) * step,
            rng.random_range(-0.05..0.05) * step,
            step,
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.02..0.02),
        ]);
        let noise = random_pose(&mut rng, 0.05 * step, 0.01);
        gt.push(gt.last().unwrap().compose(&mv));
        est.push(est.last().unwrap().compose(&mv.compose(&noise)));
    }
    (est, gt)
}

// ---------------------------------------------------------------- finite differences

/// Loss `sum(w * y)` with fixed pseudo-random weights derived from `seed`.
pub fn weighted_sum(g: &Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = g.constant(w);
    g.sum(g.mul(y, w).unwrap()).unwrap()
}

pub type Build<'a> = dyn Fn(&Graph<f64>, &[Var]) -> Var + 'a;

/// Worst relative error between reverse-mode and central-difference
/// gradients over `probes` random coordinates of each input (all when
/// `None`).
pub fn fd_worst(inputs: &[Tensor<f64>], probes: Option<usize>, seed: u64, build: &Build) -> f64 {
    let run = |ins: &[Tensor<f64>]| {
        let g = Graph::<f64>::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let l = build(&g, &vars);
        (g, vars, l)
    };
    let (g, vars, l) = run(inputs);
    g.backward(l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.numel();
        let idx: Vec<usize> = match probes {
            Some(p) if p < n => (0..p).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut probe = input.data().to_vec();
        for i in idx {
            let mut f = |x: &[f64]| {
                let mut ins = inputs.to_vec();
                ins[k] = Tensor::new(input.shape(), x.to_vec()).unwrap();
                let (g, _, l) = run(&ins);
                g.item(l)
            };
            let numeric = central_partial(&mut f, &mut probe, i, 1e-6);
            worst = worst.max(rel_err(analytic.data()[i], numeric, 1e-7));
        }
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}
