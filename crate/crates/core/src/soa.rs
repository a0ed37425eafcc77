//! Selective online adaptation: a few self-supervised updates per incoming
//! snippet, keeping whichever parameter state scored the lowest error.

use crate::error::{invalid, Error, Result};
use crate::geometry::{PoseVector6, Se3Pose};
use crate::losses::{LossWeights, ALPHA};
use crate::model::{chain_poses, forward_pair_poses, snippet_forward, Model, Sequence, SnippetInputs};
use crate::networks::{depth_forward, pose_forward, PoseInputVars};
use crate::orb::PoseInputs;
use orbvo_autodiff::{sgd_step, Graph, ParamStore};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub k: usize,
    pub frames_per_snippet: usize,
    pub lr: f64,
    pub alpha: f64,
    pub selective: bool,
    /// Window step; `None` means `frames_per_snippet - 1`.
    #[serde(default)]
    pub stride: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { k: 2, frames_per_snippet: 3, lr: 1e-4, alpha: ALPHA, selective: true, stride: None }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_snippet < 2 {
            return invalid(format!("frames per snippet must be >= 2, got {}", self.frames_per_snippet));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return invalid(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.alpha >= 0.0) {
            return invalid(format!("alpha must be >= 0, got {}", self.alpha));
        }
        check_stride(self.frames_per_snippet, self.stride)?;
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.frames_per_snippet.saturating_sub(1))
    }

    fn weights(&self) -> LossWeights {
        LossWeights { geometric: self.alpha, smoothness: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub snippet: usize,
    pub start_frame: usize,
    /// Error of each evaluated parameter state, `k + 1` entries unless skipped.
    pub errors: Vec<f64>,
    pub selected: usize,
    pub selective: bool,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skip_reason: Option<String>,
    /// Parameter fingerprint of every evaluated state.
    pub fingerprints: Vec<String>,
    /// Fingerprint of the live parameters after adaptation.
    pub live_fingerprint: String,
    pub wall_ms: f64,
}

impl AdaptTrace {
    pub fn selected_error(&self) -> Option<f64> {
        self.errors.get(self.selected).copied()
    }

    /// Error of the parameters the snippet started from.
    pub fn initial_error(&self) -> Option<f64> {
        self.errors.first().copied()
    }
}

#[derive(Debug, Clone)]
pub struct SnippetPrediction {
    /// `T_{i,i+1}` for each adjacent pair.
    pub relative: Vec<PoseVector6>,
    /// Per-frame depth maps, row-major.
    pub depths: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub prediction: SnippetPrediction,
    pub trace: AdaptTrace,
}

fn split_depths(values: &[f32], frames: usize) -> Vec<Vec<f32>> {
    let n = values.len() / frames;
    values.chunks(n).map(|c| c.to_vec()).collect()
}

/// Network outputs for a snippet without any loss evaluation.
pub fn predict_snippet(model: &Model, inputs: &SnippetInputs) -> Result<SnippetPrediction> {
    let g = Graph::<f32>::unchecked();
    let images = g.constant(inputs.images.clone());
    let d = depth_forward(&g, &model.params, images)?;
    let pose_in = match &inputs.pose {
        PoseInputs::Concatenate(t) => PoseInputVars::Concatenate(g.constant(t.clone())),
        PoseInputs::Attention { rgb, orb } => PoseInputVars::Attention { rgb: g.constant(rgb.clone()), orb: g.constant(orb.clone()) },
    };
    let p = pose_forward(&g, &model.params, &model.config, pose_in)?;
    Ok(SnippetPrediction {
        relative: forward_pair_poses(&g.value(p.pose).to_f64_vec()),
        depths: split_depths(g.value(d.depth).data(), inputs.frames),
    })
}

fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::DegenerateWarp { .. } | Error::DegenerateSupervision(_))
}

/// Adapts `model` in place on one snippet. With `selective`, the returned
/// predictions and the live parameters come from the lowest-error state;
/// otherwise from the last state evaluated.
pub fn adapt_snippet(model: &mut Model, inputs: &SnippetInputs, seq: &Sequence, cfg: &AdaptConfig) -> Result<AdaptOutput> {
    cfg.validate()?;
    if inputs.frames != cfg.frames_per_snippet {
        return invalid(format!("snippet has {} frames, configuration expects {}", inputs.frames, cfg.frames_per_snippet));
    }
    let started = Instant::now();
    let backup = model.params.clone();
    let mut errors = Vec::with_capacity(cfg.k + 1);
    let mut fingerprints = Vec::with_capacity(cfg.k + 1);
    let mut best: Option<(usize, f64, ParamStore<f32>, SnippetPrediction)> = None;
    let mut last: Option<SnippetPrediction> = None;
    for n in 0..=cfg.k {
        let g = Graph::<f32>::new();
        let out = match snippet_forward(&g, &model.params, &model.config, inputs, &seq.intrinsics, cfg.weights()) {
            Ok(out) => out,
            Err(e) if is_degenerate(&e) => {
                model.params = backup;
                let prediction = SnippetPrediction {
                    relative: vec![[0.0; 6]; inputs.frames - 1],
                    depths: predict_snippet(model, inputs)?.depths,
                };
                let trace = AdaptTrace {
                    snippet: 0,
                    start_frame: 0,
                    errors,
                    selected: 0,
                    selective: cfg.selective,
                    skipped: true,
                    skip_reason: Some(e.to_string()),
                    fingerprints,
                    live_fingerprint: model.params.fingerprint(),
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                };
                return Ok(AdaptOutput { prediction, trace });
            }
            Err(e) => return Err(e),
        };
        let err = out.loss.values.total;
        if !err.is_finite() {
            return Err(Error::Diverged { iteration: n, msg: format!("snippet error is {err}") });
        }
        errors.push(err);
        fingerprints.push(model.params.fingerprint());
        let prediction = SnippetPrediction {
            relative: forward_pair_poses(&g.value(out.poses).to_f64_vec()),
            depths: split_depths(g.value(out.depth).data(), inputs.frames),
        };
        if cfg.selective && (n == 0 || best.as_ref().is_some_and(|b| err < b.1)) {
            best = Some((n, err, model.params.clone(), prediction.clone()));
        }
        last = Some(prediction);
        if n < cfg.k {
            g.backward(out.loss.total)?;
            let grads = g.gradients()?;
            sgd_step(&mut model.params, &grads, cfg.lr)?;
        }
    }
    let (selected, prediction) = match best {
        Some((n, _, params, prediction)) => {
            model.params = params;
            (n, prediction)
        }
        None => (cfg.k, last.expect("at least one evaluation")),
    };
    let trace = AdaptTrace {
        snippet: 0,
        start_frame: 0,
        errors,
        selected,
        selective: cfg.selective,
        skipped: false,
        skip_reason: None,
        fingerprints,
        live_fingerprint: model.params.fingerprint(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(AdaptOutput { prediction, trace })
}

fn check_stride(frames: usize, stride: Option<usize>) -> Result<()> {
    match stride {
        Some(s) if s == 0 || s + 1 > frames => invalid(format!("stride must be in 1..={} for {frames}-frame snippets, got {s}", frames.saturating_sub(1))),
        _ => Ok(()),
    }
}

/// Window start frames covering every adjacent pair at least once, with a
/// final window flush against the end when the stride leaves a remainder.
/// `frames - 1` covers each pair exactly once.
pub fn window_starts(len: usize, frames: usize, stride: usize) -> Result<Vec<usize>> {
    if frames < 2 || len < frames {
        return invalid(format!("a {len}-frame sequence cannot hold a {frames}-frame snippet"));
    }
    check_stride(frames, Some(stride))?;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + frames <= len).collect();
    let covered = starts.last().expect("len >= frames") + frames - 1;
    if covered < len - 1 {
        starts.push(len - frames);
    }
    Ok(starts)
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    /// Camera-to-world, identity at frame 0.
    pub trajectory: Vec<Se3Pose>,
    /// `T_{i,i+1}` per adjacent pair.
    pub relative: Vec<Se3Pose>,
    pub traces: Vec<AdaptTrace>,
}

fn assign_pairs(relative: &mut [Option<PoseVector6>], start: usize, poses: &[PoseVector6]) {
    for (j, p) in poses.iter().enumerate() {
        let slot = &mut relative[start + j];
        if slot.is_none() {
            *slot = Some(*p);
        }
    }
}

fn finish(relative: Vec<Option<PoseVector6>>, traces: Vec<AdaptTrace>) -> SequenceResult {
    let relative: Vec<Se3Pose> = relative.into_iter().map(|p| Se3Pose::exp(&p.expect("every pair covered"))).collect();
    SequenceResult { trajectory: chain_poses(&relative), relative, traces }
}

/// Plain inference over the same windows adaptation would use.
pub fn infer_sequence(model: &Model, seq: &Sequence, frames: usize) -> Result<SequenceResult> {
    infer_sequence_strided(model, seq, frames, frames.saturating_sub(1))
}

/// Where windows overlap, the earliest window's prediction of a pair is kept.
pub fn infer_sequence_strided(model: &Model, seq: &Sequence, frames: usize, stride: usize) -> Result<SequenceResult> {
    let mut relative = vec![None; seq.len().saturating_sub(1)];
    for start in window_starts(seq.len(), frames, stride)? {
        let inputs = seq.window(start, frames, model.variant())?;
        assign_pairs(&mut relative, start, &predict_snippet(model, &inputs)?.relative);
    }
    Ok(finish(relative, Vec::new()))
}

/// Adapts snippet by snippet; parameters carry over between snippets.
/// Skipped snippets contribute identity poses.
pub fn run_sequence(model: &mut Model, seq: &Sequence, cfg: &AdaptConfig) -> Result<SequenceResult> {
    cfg.validate()?;
    let mut relative = vec![None; seq.len().saturating_sub(1)];
    let mut traces = Vec::new();
    for (i, start) in window_starts(seq.len(), cfg.frames_per_snippet, cfg.stride())?.into_iter().enumerate() {
        let inputs = seq.window(start, cfg.frames_per_snippet, model.variant())?;
        let mut out = adapt_snippet(model, &inputs, seq, cfg)?;
        out.trace.snippet = i;
        out.trace.start_frame = start;
        assign_pairs(&mut relative, start, &out.prediction.relative);
        traces.push(out.trace);
    }
    Ok(finish(relative, traces))
}

/// One JSON object per line.
pub fn write_trace_jsonl<W: Write>(traces: &[AdaptTrace], mut w: W) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
