//! Model bundle (config plus parameters) and the snippet forward pass shared
//! by training, inference and online adaptation.

use crate::error::{invalid, Result};
use crate::geometry::{CameraIntrinsics, PoseVector6, Se3Pose};
use crate::image::Image;
use crate::losses::{snippet_loss, LossBundle, LossWeights, SnippetVars};
use crate::networks::{depth_forward, init_params, pose_forward, NetConfig, PoseInputVars};
use crate::orb::{assemble_pose_inputs, orb_tensor_for, OrbParams, OrbTensor, PoseInputs, PoseVariant};
use orbvo_autodiff::{load_params, save_params, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestConfig {
    net: NetConfig,
    init_seed: Option<u64>,
}

impl Model {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn variant(&self) -> PoseVariant {
        self.config.variant
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(ManifestConfig { net: self.config.clone(), init_seed: None })?;
        save_params(&self.params, cfg, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, cfg) = load_params::<f32>(path)?;
        let m: ManifestConfig = serde_json::from_value(cfg)?;
        m.net.validate()?;
        let fresh = init_params(&m.net, 0)?;
        for (name, t) in fresh.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return invalid(format!("parameter `{name}` has shape {:?}, expected {:?}", p.shape(), t.shape())),
                None => return invalid(format!("model file lacks parameter `{name}`")),
            }
        }
        if params.len() != fresh.len() {
            return invalid("model file has parameters the configuration does not use");
        }
        Ok(Self { config: m.net, params })
    }
}

/// Frames of one sequence with their ORB tensors, computed once.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub orb: Vec<OrbTensor>,
    pub intrinsics: CameraIntrinsics,
}

impl Sequence {
    pub fn new(frames: Vec<Image>, intrinsics: CameraIntrinsics, orb_params: &OrbParams) -> Result<Self> {
        let Some(first) = frames.first() else {
            return invalid("empty sequence");
        };
        for (i, f) in frames.iter().enumerate() {
            if !f.same_size(first) || f.channels != 3 {
                return invalid(format!(
                    "frame {i} is {}x{}x{}, expected {}x{}x3",
                    f.channels, f.width, f.height, first.width, first.height
                ));
            }
        }
        let orb = frames.iter().map(|f| orb_tensor_for(f, orb_params)).collect::<Result<_>>()?;
        Ok(Self { frames, orb, intrinsics })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Consecutive frames `start .. start + len`, laid out for `variant`.
    pub fn window(&self, start: usize, len: usize, variant: PoseVariant) -> Result<SnippetInputs> {
        if len < 2 || start + len > self.len() {
            return invalid(format!("window {start}+{len} exceeds a {}-frame sequence", self.len()));
        }
        SnippetInputs::new(&self.frames[start..start + len], &self.orb[start..start + len], variant)
    }
}

/// Network inputs for one snippet in the layout [`snippet_forward`] expects.
#[derive(Debug, Clone)]
pub struct SnippetInputs {
    pub frames: usize,
    /// `[n, 3, h, w]`.
    pub images: Tensor<f32>,
    /// Directed pairs in the order `(0,1), (1,0), (1,2), (2,1), ...`.
    pub pose: PoseInputs,
}

fn stack_batch(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("parts share trailing dims")
}

impl SnippetInputs {
    pub fn new(frames: &[Image], orb: &[OrbTensor], variant: PoseVariant) -> Result<Self> {
        if frames.len() < 2 || frames.len() != orb.len() {
            return invalid(format!("snippet needs >= 2 frames with ORB tensors, got {} and {}", frames.len(), orb.len()));
        }
        let mut pairs = Vec::new();
        for i in 0..frames.len() - 1 {
            for (a, b) in [(i, i + 1), (i + 1, i)] {
                pairs.push(assemble_pose_inputs(&frames[a], &frames[b], &orb[a], &orb[b], variant)?);
            }
        }
        let imgs: Vec<Tensor<f32>> = frames.iter().map(|f| f.to_tensor()).collect();
        let images = stack_batch(&imgs.iter().collect::<Vec<_>>());
        let pose = match variant {
            PoseVariant::Concatenate => PoseInputs::Concatenate(stack_batch(
                &pairs.iter().filter_map(|p| if let PoseInputs::Concatenate(t) = p { Some(t) } else { None }).collect::<Vec<_>>(),
            )),
            PoseVariant::Attention => {
                let (mut rgb, mut orb) = (Vec::new(), Vec::new());
                for p in &pairs {
                    if let PoseInputs::Attention { rgb: r, orb: o } = p {
                        rgb.push(r);
                        orb.push(o);
                    }
                }
                PoseInputs::Attention { rgb: stack_batch(&rgb), orb: stack_batch(&orb) }
            }
        };
        Ok(Self { frames: frames.len(), images, pose })
    }
}

pub struct SnippetForward {
    pub loss: LossBundle,
    /// `[2 (n - 1), 6]`, directed pairs as in [`SnippetInputs::pose`].
    pub poses: Var,
    pub depth: Var,
    pub disparity: Var,
    pub attention: Option<Var>,
}

/// Runs both networks on a snippet and evaluates the self-supervised loss.
pub fn snippet_forward<T: Scalar>(
    g: &Graph<T>,
    params: &ParamStore<T>,
    cfg: &NetConfig,
    inputs: &SnippetInputs,
    k: &CameraIntrinsics,
    weights: LossWeights,
) -> Result<SnippetForward> {
    let images = g.constant(inputs.images.cast());
    let d = depth_forward(g, params, images)?;
    let pose_in = match (&inputs.pose, cfg.variant) {
        (PoseInputs::Concatenate(t), PoseVariant::Concatenate) => PoseInputVars::Concatenate(g.constant(t.cast())),
        (PoseInputs::Attention { rgb, orb }, PoseVariant::Attention) => {
            PoseInputVars::Attention { rgb: g.constant(rgb.cast()), orb: g.constant(orb.cast()) }
        }
        _ => return invalid("snippet inputs were assembled for the other pose variant"),
    };
    let p = pose_forward(g, params, cfg, pose_in)?;
    let vars = SnippetVars { images, depths: d.depth, disparities: Some(d.disparity), poses: p.pose };
    let loss = snippet_loss(g, &vars, k, weights)?;
    Ok(SnippetForward { loss, poses: p.pose, depth: d.depth, disparity: d.disparity, attention: p.attention })
}

/// Forward relative poses `T_{i,i+1}` from the directed-pair pose rows.
pub fn forward_pair_poses(rows: &[f64]) -> Vec<PoseVector6> {
    rows.chunks(12).map(|c| std::array::from_fn(|j| c[j])).collect()
}

/// Chains relative poses `T_{i,i+1}` (frame i into frame i+1) into
/// camera-to-world poses anchored at the identity.
pub fn chain_poses(relative: &[Se3Pose]) -> Vec<Se3Pose> {
    let mut out = vec![Se3Pose::identity()];
    for r in relative {
        let last = *out.last().expect("non-empty");
        out.push(last.compose(&r.inverse()));
    }
    out
}
