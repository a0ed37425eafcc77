//! Loss-bundle, attention and adaptation checks on real model runs.

use orbvo::geometry::CameraIntrinsics;
use orbvo::image::Image;
use orbvo::losses::{snippet_loss, LossValues, LossWeights, SnippetVars, SSIM_C1};
use orbvo::model::{Model, Sequence};
use orbvo::networks::{pose_forward, reduce_attention, HeadSelect, NetConfig, PoseInputVars};
use orbvo::orb::{OrbParams, PoseInputs, PoseVariant};
use orbvo::soa::{adapt_snippet, infer_sequence, run_sequence, AdaptConfig, AdaptTrace};
use orbvo::synth::{generate_scene, random_motion};
use orbvo_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two constant frames (0 and 1) with constant depths 9 and 9.9, identity
/// poses and constant disparity.
pub fn constant_pair_bundle(weights: LossWeights) -> LossValues {
    let (w, h) = (8, 8);
    let n = w * h;
    let g = Graph::<f64>::new();
    let mut img = vec![0.0; 3 * n];
    img.extend(vec![1.0; 3 * n]);
    let mut depth = vec![9.0; n];
    depth.extend(vec![9.9; n]);
    let vars = SnippetVars {
        images: g.constant(Tensor::new(&[2, 3, h, w], img).unwrap()),
        depths: g.constant(Tensor::new(&[2, 1, h, w], depth).unwrap()),
        disparities: Some(g.constant(Tensor::full(&[2, 1, h, w], 0.3))),
        poses: g.constant(Tensor::zeros(&[2, 6])),
    };
    snippet_loss(&g, &vars, &CameraIntrinsics::for_size(w, h), weights).unwrap().values
}

/// Hand-derived photometric error between constant images 0 and 1.
pub fn constant_photometric_expected(lambda: f64) -> f64 {
    let ssim = SSIM_C1 / (1.0 + SSIM_C1);
    lambda + (1.0 - lambda) * (1.0 - ssim) / 2.0
}

/// A textured snippet whose frames are all the same image, identity poses.
pub fn identical_frames_bundle() -> LossValues {
    let s = generate_scene(5, 1, 32, 32, [0.0; 6]).unwrap();
    let (w, h) = (32, 32);
    let g = Graph::<f64>::new();
    let img = s.images[0].to_tensor().cast::<f64>();
    let frames: Vec<f64> = img.data().iter().chain(img.data()).copied().collect();
    let depth: Vec<f64> = s.depths[0].iter().chain(&s.depths[0]).map(|&d| d as f64).collect();
    let vars = SnippetVars {
        images: g.constant(Tensor::new(&[2, 3, h, w], frames).unwrap()),
        depths: g.constant(Tensor::new(&[2, 1, h, w], depth).unwrap()),
        disparities: Some(g.constant(Tensor::full(&[2, 1, h, w], 0.25))),
        poses: g.constant(Tensor::zeros(&[2, 6])),
    };
    snippet_loss(&g, &vars, &s.intrinsics, LossWeights::TRAINING).unwrap().values
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(3, w, h, (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Attention weights `[heads, L, L]` of the first item of an attention pose
/// forward pass on a random `w x h` pair, plus the head count.
pub fn attention_weights(seed: u64, w: usize, h: usize) -> (Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = vec![random_image(&mut rng, w, h), random_image(&mut rng, w, h)];
    let seq = Sequence::new(frames, CameraIntrinsics::for_size(w, h), &OrbParams::default().fitted_to(w, h)).unwrap();
    let model = Model::init(NetConfig::new(PoseVariant::Attention), seed).unwrap();
    let inputs = seq.window(0, 2, PoseVariant::Attention).unwrap();
    let PoseInputs::Attention { rgb, orb } = inputs.pose else { unreachable!("attention window") };
    let g = Graph::<f32>::new();
    let vars = PoseInputVars::Attention { rgb: g.constant(rgb), orb: g.constant(orb) };
    let out = pose_forward(&g, &model.params, &model.config, vars).unwrap();
    let a = g.value(out.attention.expect("attention variant"));
    let shape = a.shape().to_vec();
    let per_item = shape[1] * shape[2] * shape[3];
    (a.data()[..per_item].iter().map(|&v| v as f64).collect(), shape[1])
}

/// Largest deviation of an attention row sum from one.
pub fn row_sum_gap(weights: &[f64], heads: usize) -> f64 {
    let l = ((weights.len() / heads) as f64).sqrt().round() as usize;
    weights.chunks(l).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// Heatmap of weights whose every row puts all mass on key `j`.
pub fn one_hot_heatmap(j: usize, heads: usize, w: usize, h: usize) -> orbvo::networks::AttentionHeatmap {
    let l = (w / 32) * (h / 32);
    let mut weights = vec![0.0; heads * l * l];
    for row in 0..heads * l {
        weights[row * l + j] = 1.0;
    }
    reduce_attention(&weights, heads, w, h, HeadSelect::Mean).unwrap()
}

/// Whether the grid maximum is unique and sits at `j`, and the heatmap
/// maximum falls inside cell `j`.
pub fn one_hot_localized(j: usize, w: usize, h: usize) -> bool {
    let hm = one_hot_heatmap(j, 8, w, h);
    let top = hm.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unique = hm.grid.iter().enumerate().all(|(i, &v)| (i == j) == (v == top));
    let (px, _) = hm.heatmap.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let (x, y) = (px % w, px / w);
    unique && y / 32 * hm.grid_cols + x / 32 == j
}

pub fn adaptation_sequence(seed: u64, frames: usize) -> Sequence {
    let s = generate_scene(seed, frames, 64, 64, random_motion(seed)).unwrap();
    Sequence::new(s.images, s.intrinsics, &OrbParams::default()).unwrap()
}

/// Traces where the selected error exceeds the first one.
pub fn selection_violations(traces: &[AdaptTrace]) -> usize {
    traces.iter().filter(|t| !t.skipped && t.selected_error().unwrap() > t.initial_error().unwrap()).count()
}

/// Adapts `model` on each snippet of `seq` and confirms, per snippet, that
/// the restored parameters hash to the selected state and bit-equal a
/// replay that stops at the selected iteration. Returns the traces.
pub fn checked_adaptation(model: &mut Model, seq: &Sequence, cfg: &AdaptConfig) -> Result<Vec<AdaptTrace>, String> {
    let mut traces = Vec::new();
    for start in orbvo::soa::window_starts(seq.len(), cfg.frames_per_snippet, cfg.stride()).unwrap() {
        let inputs = seq.window(start, cfg.frames_per_snippet, model.variant()).unwrap();
        let before = model.clone();
        let out = adapt_snippet(model, &inputs, seq, cfg).unwrap();
        let t = out.trace;
        if t.skipped {
            if model.params != before.params {
                return Err(format!("snippet at {start} skipped without restoring"));
            }
            traces.push(t);
            continue;
        }
        if t.fingerprints[0] != before.params.fingerprint() {
            return Err(format!("snippet at {start}: first state is not the incoming one"));
        }
        if model.params.fingerprint() != t.fingerprints[t.selected] || t.live_fingerprint != t.fingerprints[t.selected] {
            return Err(format!("snippet at {start}: live parameters do not hash to state {}", t.selected));
        }
        let mut replay = before.clone();
        let stop = AdaptConfig { k: t.selected, selective: false, ..cfg.clone() };
        adapt_snippet(&mut replay, &inputs, seq, &stop).unwrap();
        if replay.params != model.params {
            return Err(format!("snippet at {start}: restored state differs from a replay to iteration {}", t.selected));
        }
        traces.push(t);
    }
    Ok(traces)
}

/// Whether `k = 0` adaptation leaves the model untouched and reproduces
/// plain inference bit for bit.
pub fn k_zero_matches_inference(model: &Model, seq: &Sequence) -> bool {
    let inferred = infer_sequence(model, seq, 3).unwrap();
    let mut m = model.clone();
    let adapted = run_sequence(&mut m, seq, &AdaptConfig { k: 0, ..AdaptConfig::default() }).unwrap();
    m == *model && adapted.trajectory == inferred.trajectory && adapted.relative == inferred.relative
}
