//! Dense 33-channel keypoint tensors and pose-network input assembly.

use super::{extract_orb, OrbFeatureSet, OrbParams};
use crate::error::{invalid, Result};
use crate::image::{to_grayscale, Image};
use orbvo_autodiff::Tensor;
use serde::{Deserialize, Serialize};

pub const ORB_CHANNELS: usize = 33;

/// Channel 0 marks keypoint pixels with 1; channels 1..=32 hold the
/// descriptor bytes scaled by 1/255.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbTensor {
    /// `[33, h, w]`.
    pub tensor: Tensor<f32>,
    /// Keypoints whose rounded position fell outside the image and was clamped.
    pub clamped: usize,
    /// Occupied pixels after collision resolution.
    pub placed: usize,
}

pub fn pack_orb_tensor(features: &OrbFeatureSet, width: usize, height: usize) -> OrbTensor {
    let plane = width * height;
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    let mut clamped = 0;
    for (i, kp) in features.keypoints.iter().enumerate() {
        let rx = kp.x.round() as i64;
        let ry = kp.y.round() as i64;
        let cx = rx.clamp(0, width as i64 - 1);
        let cy = ry.clamp(0, height as i64 - 1);
        if (cx, cy) != (rx, ry) {
            clamped += 1;
        }
        let slot = &mut owner[cy as usize * width + cx as usize];
        match *slot {
            Some(j) if features.keypoints[j].response >= kp.response => {}
            _ => *slot = Some(i),
        }
    }
    let mut data = vec![0f32; ORB_CHANNELS * plane];
    let mut placed = 0;
    for (p, o) in owner.iter().enumerate() {
        let Some(i) = *o else { continue };
        placed += 1;
        data[p] = 1.0;
        for (j, &b) in features.keypoints[i].descriptor.iter().enumerate() {
            data[(1 + j) * plane + p] = b as f32 / 255.0;
        }
    }
    if clamped > 0 {
        log_clamped(clamped);
    }
    OrbTensor {
        tensor: Tensor::new(&[ORB_CHANNELS, height, width], data).expect("sized above"),
        clamped,
        placed,
    }
}

fn log_clamped(n: usize) {
    eprintln!("warning: {n} keypoint(s) clamped to the image border while packing");
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseVariant {
    Concatenate,
    Attention,
}

/// Pose-network inputs for one frame pair, batch dimension 1.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseInputs {
    /// `[1, 72, h, w]`: frame t RGB, frame t ORB, frame t+1 RGB, frame t+1 ORB.
    Concatenate(Tensor<f32>),
    /// `[1, 6, h, w]` RGB pair and `[1, 66, h, w]` ORB pair.
    Attention { rgb: Tensor<f32>, orb: Tensor<f32> },
}

/// Extracts and packs features for both frames, then assembles the inputs.
pub fn make_pose_inputs(
    frame_t: &Image,
    frame_t1: &Image,
    feats_t: &OrbFeatureSet,
    feats_t1: &OrbFeatureSet,
    variant: PoseVariant,
) -> Result<PoseInputs> {
    let a = pack_orb_tensor(feats_t, frame_t.width, frame_t.height);
    let b = pack_orb_tensor(feats_t1, frame_t1.width, frame_t1.height);
    assemble_pose_inputs(frame_t, frame_t1, &a, &b, variant)
}

/// Grayscale conversion, extraction and packing for one frame.
pub fn orb_tensor_for(frame: &Image, params: &OrbParams) -> Result<OrbTensor> {
    let gray = to_grayscale(frame)?;
    let feats = extract_orb(&gray, &params.fitted_to(frame.width, frame.height))?;
    Ok(pack_orb_tensor(&feats, frame.width, frame.height))
}

pub fn assemble_pose_inputs(
    frame_t: &Image,
    frame_t1: &Image,
    orb_t: &OrbTensor,
    orb_t1: &OrbTensor,
    variant: PoseVariant,
) -> Result<PoseInputs> {
    if !frame_t.same_size(frame_t1) || frame_t.channels != 3 || frame_t1.channels != 3 {
        return invalid(format!(
            "frame pair mismatch: {}x{}x{} vs {}x{}x{}",
            frame_t.channels, frame_t.width, frame_t.height, frame_t1.channels, frame_t1.width, frame_t1.height
        ));
    }
    let (w, h) = (frame_t.width, frame_t.height);
    for o in [orb_t, orb_t1] {
        if o.tensor.shape() != [ORB_CHANNELS, h, w] {
            return invalid(format!("ORB tensor {:?} does not match {w}x{h} frames", o.tensor.shape()));
        }
    }
    let stack = |parts: &[&[f32]]| {
        let data: Vec<f32> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        let c = data.len() / (w * h);
        Tensor::new(&[1, c, h, w], data).expect("whole planes")
    };
    Ok(match variant {
        PoseVariant::Concatenate => PoseInputs::Concatenate(stack(&[
            &frame_t.data,
            orb_t.tensor.data(),
            &frame_t1.data,
            orb_t1.tensor.data(),
        ])),
        PoseVariant::Attention => PoseInputs::Attention {
            rgb: stack(&[&frame_t.data, &frame_t1.data]),
            orb: stack(&[orb_t.tensor.data(), orb_t1.tensor.data()]),
        },
    })
}
