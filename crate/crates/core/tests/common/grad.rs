//! Gradient checks shared by the gradient suite and the acceptance run.

use super::{fd_worst, uniform, weighted_sum};
use orbvo::geometry::CameraIntrinsics;
use orbvo::losses::{geometric_loss, photometric_loss, smoothness_loss, snippet_loss, ssim_map, LossWeights, SnippetVars};
use orbvo::model::{snippet_forward, Model, Sequence};
use orbvo::networks::{cross_attention, NetConfig};
use orbvo::orb::{OrbParams, PoseVariant};
use orbvo::synth::{generate_scene, DEFAULT_MOTION};
use orbvo::warp::inverse_warp;
use orbvo_autodiff::fd::rel_err;
use orbvo_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mask(r: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(&[b, 1, h, w], (0..b * h * w).map(|_| if r.random_bool(0.8) { 1.0 } else { 0.0 }).collect()).unwrap()
}

pub fn ssim_worst(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0), uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0)];
    fd_worst(&ins, None, seed, &|g, v| weighted_sum(g, ssim_map(g, v[0], v[1]).unwrap(), seed))
}

pub fn photometric_worst(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 6, 7], 0.0, 1.0);
    let b = uniform(&mut r, &[2, 3, 6, 7], 0.0, 1.0);
    let m = mask(&mut r, 2, 6, 7);
    fd_worst(&[a, b], None, seed, &|g, v| photometric_loss(g, v[0], v[1], &m).unwrap())
}

pub fn geometric_worst(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 1, 5, 6], 1.0, 10.0);
    let b = uniform(&mut r, &[2, 1, 5, 6], 1.0, 10.0);
    let m = mask(&mut r, 2, 5, 6);
    fd_worst(&[a, b], None, seed, &|g, v| geometric_loss(g, v[0], v[1], &m).unwrap())
}

pub fn smoothness_worst(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = uniform(&mut r, &[2, 1, 6, 5], 0.01, 1.0);
    let img = uniform(&mut r, &[2, 3, 6, 5], 0.0, 1.0);
    fd_worst(&[d, img], None, seed, &|g, v| smoothness_loss(g, v[0], v[1]).unwrap())
}

/// Gradients of synthesized image, projected depth and sampled source depth
/// with respect to source image, source depth, target depth and pose.
pub fn warp_worst(seed: u64) -> f64 {
    let (w, h) = (12, 10);
    let k = CameraIntrinsics::for_size(w, h);
    let mut r = rng(seed);
    let src = uniform(&mut r, &[2, 3, h, w], 0.0, 1.0);
    let src_d = uniform(&mut r, &[2, 1, h, w], 4.0, 6.0);
    let tgt_d = uniform(&mut r, &[2, 1, h, w], 4.0, 6.0);
    let pose = Tensor::new(&[2, 6], (0..12).map(|i| r.random_range(-1.0..1.0) * if i % 6 < 3 { 0.3 } else { 0.03 }).collect()).unwrap();
    fd_worst(&[src, src_d, tgt_d, pose], None, seed, &|g, v| {
        let out = inverse_warp(g, v[0], Some(v[1]), v[2], v[3], &k).unwrap();
        let a = weighted_sum(g, out.synthesized, seed);
        let b = weighted_sum(g, out.proj_depth, seed + 1);
        let c = weighted_sum(g, out.sampled_depth.unwrap(), seed + 2);
        g.add(g.add(a, b).unwrap(), c).unwrap()
    })
}

fn attention_inputs(seed: u64) -> Vec<Tensor<f64>> {
    let (c, e) = (4, 8);
    let mut r = rng(seed);
    let shapes: [&[usize]; 8] = [&[c, e], &[e], &[c, e], &[e], &[c, e], &[e], &[e, c], &[c]];
    let mut ins = vec![uniform(&mut r, &[2, c, 2, 3], -1.0, 1.0), uniform(&mut r, &[2, c, 2, 3], -1.0, 1.0)];
    ins.extend(shapes.iter().map(|s| uniform(&mut r, s, -0.8, 0.8)));
    ins
}

const ATTN_PARAMS: [&str; 8] = ["q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "out.w", "out.b"];
const KEY_BIAS: usize = 2 + 3;

/// `vars` holds both feature maps followed by the parameters in
/// `ATTN_PARAMS` order.
fn attention_objective(g: &Graph<f64>, vars: &[Var], seed: u64) -> Var {
    let mut store = ParamStore::new();
    for (i, n) in ATTN_PARAMS.iter().enumerate() {
        let name = format!("a/{n}");
        store.insert(name.clone(), (*g.value(vars[2 + i])).clone()).unwrap();
        g.bind_param(&name, vars[2 + i]);
    }
    let out = cross_attention(g, &store, "a", vars[0], vars[1], 2).unwrap();
    let a = weighted_sum(g, out.fused, seed);
    let b = weighted_sum(g, out.weights, seed + 1);
    g.add(a, b).unwrap()
}

/// Cross-attention on a 2x3 map, differentiated with respect to both feature
/// maps and every projection parameter except the key bias, whose gradient
/// is identically zero and is checked on its own.
pub fn attention_worst(seed: u64) -> f64 {
    let all = attention_inputs(seed);
    let key_bias = all[KEY_BIAS].clone();
    let mut ins = all;
    ins.remove(KEY_BIAS);
    fd_worst(&ins, None, seed, &|g, v| {
        let mut vars = v.to_vec();
        vars.insert(KEY_BIAS, g.constant(key_bias.clone()));
        attention_objective(g, &vars, seed)
    })
}

/// Largest magnitude of the analytic key-bias gradient.
pub fn key_bias_gradient(seed: u64) -> f64 {
    let ins = attention_inputs(seed);
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
    let l = attention_objective(&g, &vars, seed);
    g.backward(l).unwrap();
    g.grad(vars[KEY_BIAS]).map_or(0.0, |t| t.data().iter().fold(0.0, |m: f64, x| m.max(x.abs())))
}

/// Snippet loss over three 16x16 frames with respect to images, depths,
/// disparities and the directed-pair poses.
pub fn snippet_loss_worst(seed: u64) -> f64 {
    let (w, h) = (16, 16);
    let k = CameraIntrinsics::for_size(w, h);
    let mut r = rng(seed);
    let imgs = uniform(&mut r, &[3, 3, h, w], 0.0, 1.0);
    let depths = uniform(&mut r, &[3, 1, h, w], 4.0, 6.0);
    let disp = uniform(&mut r, &[3, 1, h, w], 0.1, 0.3);
    let poses = Tensor::new(&[4, 6], (0..24).map(|i| r.random_range(-1.0..1.0) * if i % 6 < 3 { 0.2 } else { 0.02 }).collect()).unwrap();
    fd_worst(&[imgs, depths, disp, poses], Some(40), seed, &|g, v| {
        let vars = SnippetVars { images: v[0], depths: v[1], disparities: Some(v[2]), poses: v[3] };
        snippet_loss(g, &vars, &k, LossWeights::TRAINING).unwrap().total
    })
}

/// Spot checks of d(total loss)/d(parameter) through both networks on a
/// 32x32 three-frame snippet. Returns the worst error and the probe count.
pub fn end_to_end_worst(variant: PoseVariant, seed: u64, probes: usize) -> (f64, usize) {
    let scene = generate_scene(seed, 3, 32, 32, DEFAULT_MOTION).unwrap();
    let seq = Sequence::new(scene.images, scene.intrinsics, &OrbParams::default()).unwrap();
    let inputs = seq.window(0, 3, variant).unwrap();
    let model = Model::init(NetConfig::new(variant), seed).unwrap();
    let params: ParamStore<f64> = model.params.cast();
    let loss_of = |p: &ParamStore<f64>| {
        let g = Graph::<f64>::new();
        let out = snippet_forward(&g, p, &model.config, &inputs, &seq.intrinsics, LossWeights::TRAINING).unwrap();
        (g, out.loss.total)
    };
    let (g, l) = loss_of(&params);
    g.backward(l).unwrap();
    let grads = g.gradients().unwrap();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let name = &names[r.random_range(0..names.len())];
        let n = params.expect(name).numel();
        let i = r.random_range(0..n);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[i]);
        let x0 = params.expect(name).data()[i];
        let step = 1e-6 * (1.0 + x0.abs());
        let eval = |x: f64| {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] = x;
            let (g, l) = loss_of(&p);
            g.item(l)
        };
        let numeric = (eval(x0 + step) - eval(x0 - step)) / (2.0 * step);
        worst = worst.max(rel_err(analytic, numeric, 1e-7));
    }
    (worst, probes)
}
