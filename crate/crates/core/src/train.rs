//! Toy pre-training on generator sequences.

use crate::error::{invalid, Error, Result};
use crate::losses::{LossValues, LossWeights};
use crate::model::{snippet_forward, Model, Sequence};
use orbvo_autodiff::{Adam, Graph, Optimizer, Sgd};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub snippet_frames: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            snippet_frames: 3,
            weights: LossWeights::TRAINING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub sequence: usize,
    pub start: usize,
    #[serde(flatten)]
    pub loss: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub config: TrainConfig,
    /// One entry per iteration, loss before that iteration's update.
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn totals(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.loss.total).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean total loss over every snippet window of every sequence.
pub fn evaluate_windows(model: &Model, data: &[Sequence], frames: usize, weights: LossWeights) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for seq in data {
        for start in 0..=seq.len().saturating_sub(frames) {
            let inputs = seq.window(start, frames, model.variant())?;
            let g = Graph::<f32>::unchecked();
            let out = snippet_forward(&g, &model.params, &model.config, &inputs, &seq.intrinsics, weights)?;
            sum += out.loss.values.total;
            n += 1;
        }
    }
    if n == 0 {
        return invalid(format!("no {frames}-frame window in the training data"));
    }
    Ok(sum / n as f64)
}

/// Trains `model` on uniformly sampled snippets. `lr = 0` evaluates only.
pub fn train_toy(model: &mut Model, data: &[Sequence], cfg: &TrainConfig) -> Result<LossCurve> {
    if cfg.snippet_frames < 2 {
        return invalid("snippets need at least two frames");
    }
    if !(cfg.lr >= 0.0) {
        return invalid(format!("learning rate must be >= 0, got {}", cfg.lr));
    }
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data[i].len() >= cfg.snippet_frames).collect();
    if eligible.is_empty() {
        return invalid(format!("no sequence has {} frames", cfg.snippet_frames));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.lr }),
        OptimizerKind::Adam => Box::new(Adam::new(cfg.lr)),
    };
    let mut points = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let sequence = eligible[rng.random_range(0..eligible.len())];
        let seq = &data[sequence];
        let start = rng.random_range(0..=seq.len() - cfg.snippet_frames);
        let inputs = seq.window(start, cfg.snippet_frames, model.variant())?;
        let g = Graph::<f32>::new();
        let out = snippet_forward(&g, &model.params, &model.config, &inputs, &seq.intrinsics, cfg.weights)
            .map_err(|e| at_iteration(e, iteration))?;
        let loss = out.loss.values;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { iteration, msg: format!("loss is {}", loss.total) });
        }
        points.push(CurvePoint { iteration, sequence, start, loss });
        if cfg.lr > 0.0 {
            g.backward(out.loss.total).map_err(|e| at_iteration(e.into(), iteration))?;
            let grads = g.gradients()?;
            opt.step(&mut model.params, &grads).map_err(|e| at_iteration(e.into(), iteration))?;
        }
    }
    Ok(LossCurve { config: cfg.clone(), points })
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    if e.is_numeric() {
        Error::Diverged { iteration, msg: e.to_string() }
    } else {
        e
    }
}
