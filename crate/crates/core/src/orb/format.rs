//! JSON and compact binary encodings of feature sets.

use super::{OrbFeatureSet, OrbKeypoint};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ORBF_MAGIC: &[u8; 4] = b"ORBF";
pub const ORBF_VERSION: u8 = 1;
pub const ORBF_RECORD_BYTES: usize = 53;

#[derive(Serialize, Deserialize)]
struct KeypointJson {
    x: f32,
    y: f32,
    level: u8,
    angle: f32,
    response: f64,
    desc_hex: String,
}

#[derive(Serialize, Deserialize)]
struct SetJson {
    width: usize,
    height: usize,
    keypoints: Vec<KeypointJson>,
}

pub fn write_json(set: &OrbFeatureSet) -> Result<String> {
    let doc = SetJson {
        width: set.width,
        height: set.height,
        keypoints: set
            .keypoints
            .iter()
            .map(|k| KeypointJson {
                x: k.x,
                y: k.y,
                level: k.level,
                angle: k.angle,
                response: k.response,
                desc_hex: hex::encode(k.descriptor),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn read_json(text: &str) -> Result<OrbFeatureSet> {
    let doc: SetJson = serde_json::from_str(text)?;
    let keypoints = doc
        .keypoints
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let mut descriptor = [0u8; 32];
            hex::decode_to_slice(&k.desc_hex, &mut descriptor)
                .map_err(|e| Error::InvalidInput(format!("keypoint {i}: descriptor: {e}")))?;
            Ok(OrbKeypoint { x: k.x, y: k.y, level: k.level, angle: k.angle, response: k.response, descriptor })
        })
        .collect::<Result<_>>()?;
    Ok(OrbFeatureSet { width: doc.width, height: doc.height, keypoints })
}

/// Little-endian: magic, version, width u32, height u32, count u32, then
/// 53-byte records `x f32, y f32, level u8, angle f32, response f64, desc[32]`.
pub fn write_binary(set: &OrbFeatureSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + ORBF_RECORD_BYTES * set.keypoints.len());
    out.extend_from_slice(ORBF_MAGIC);
    out.push(ORBF_VERSION);
    out.extend_from_slice(&(set.width as u32).to_le_bytes());
    out.extend_from_slice(&(set.height as u32).to_le_bytes());
    out.extend_from_slice(&(set.keypoints.len() as u32).to_le_bytes());
    for k in &set.keypoints {
        out.extend_from_slice(&k.x.to_le_bytes());
        out.extend_from_slice(&k.y.to_le_bytes());
        out.push(k.level);
        out.extend_from_slice(&k.angle.to_le_bytes());
        out.extend_from_slice(&k.response.to_le_bytes());
        out.extend_from_slice(&k.descriptor);
    }
    out
}

pub fn read_binary(bytes: &[u8]) -> Result<OrbFeatureSet> {
    let bad = |m: &str| Error::InvalidInput(format!("ORBF: {m}"));
    if bytes.len() < 17 || &bytes[..4] != ORBF_MAGIC {
        return Err(bad("missing header"));
    }
    if bytes[4] != ORBF_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (width, height, count) = (u32_at(5) as usize, u32_at(9) as usize, u32_at(13) as usize);
    if bytes.len() != 17 + count * ORBF_RECORD_BYTES {
        return Err(bad(&format!("{} bytes for {count} records", bytes.len())));
    }
    let keypoints = bytes[17..]
        .chunks_exact(ORBF_RECORD_BYTES)
        .map(|r| {
            let f = |o: usize| f32::from_le_bytes(r[o..o + 4].try_into().expect("4 bytes"));
            OrbKeypoint {
                x: f(0),
                y: f(4),
                level: r[8],
                angle: f(9),
                response: f64::from_le_bytes(r[13..21].try_into().expect("8 bytes")),
                descriptor: r[21..53].try_into().expect("32 bytes"),
            }
        })
        .collect();
    Ok(OrbFeatureSet { width, height, keypoints })
}
