//! KITTI-style files: pose lists, calibration, PNG frames, 16-bit depth and
//! sequence directories.

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraIntrinsics, Se3Pose};
use crate::image::Image;
use crate::synth::SyntheticScene;
use image::{ImageBuffer, Luma, Rgb};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// C-style `%.6e`: six fractional digits, signed exponent of at least two digits.
pub fn format_e6(v: f64) -> String {
    let s = format!("{v:.6e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

pub fn format_kitti_poses(poses: &[Se3Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|&v| format_e6(v)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// One camera-to-world pose per non-empty line, 12 row-major values.
pub fn parse_kitti_poses(text: &str) -> Result<Vec<Se3Pose>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_floats(line, i + 1)?;
        if vals.len() != 12 {
            return Err(Error::Parse { line: i + 1, msg: format!("expected 12 values, found {}", vals.len()) });
        }
        poses.push(Se3Pose::from_row_major_3x4(&vals.try_into().expect("length checked")));
    }
    Ok(poses)
}

fn parse_floats(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(Error::Parse { line: lineno, msg: format!("non-finite value {v}") }),
            Err(_) => Err(Error::Parse { line: lineno, msg: format!("`{tok}` is not a number") }),
        })
        .collect()
}

pub fn load_kitti_poses(path: &Path) -> Result<Vec<Se3Pose>> {
    parse_kitti_poses(&fs::read_to_string(path)?)
}

pub fn save_kitti_poses(poses: &[Se3Pose], path: &Path) -> Result<()> {
    fs::write(path, format_kitti_poses(poses))?;
    Ok(())
}

/// Accepts `fx fy cx cy` on one line, or KITTI calibration lines `P0: ...`
/// through `P3: ...` (P2 preferred, then P0).
pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let mut projections: Vec<(String, usize, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once(':') {
            Some((key, rest)) => {
                let key = key.trim();
                if matches!(key, "P0" | "P1" | "P2" | "P3") {
                    projections.push((key.to_string(), i + 1, parse_floats(rest, i + 1)?));
                }
            }
            None => {
                let v = parse_floats(line, i + 1)?;
                if v.len() != 4 {
                    return Err(Error::Parse { line: i + 1, msg: format!("expected `fx fy cx cy`, found {} values", v.len()) });
                }
                return CameraIntrinsics::new(v[0], v[1], v[2], v[3]);
            }
        }
    }
    let pick = ["P2", "P0"].iter().find_map(|want| projections.iter().find(|(k, _, _)| k == want));
    let Some((_, line, p)) = pick else {
        return invalid("calibration has neither `fx fy cx cy` nor a P0/P2 line");
    };
    if p.len() != 12 {
        return Err(Error::Parse { line: *line, msg: format!("projection matrix needs 12 values, found {}", p.len()) });
    }
    CameraIntrinsics::new(p[0], p[5], p[2], p[6])
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    parse_intrinsics(&fs::read_to_string(path)?)
}

/// KITTI calibration text with `P0`..`P3` all equal to `[K | 0]`.
pub fn format_calib(k: &CameraIntrinsics) -> String {
    let m = [k.fx, 0.0, k.cx, 0.0, 0.0, k.fy, k.cy, 0.0, 0.0, 0.0, 1.0, 0.0];
    let row: Vec<String> = m.iter().map(|&v| format_e6(v)).collect();
    (0..4).map(|i| format!("P{i}: {}\n", row.join(" "))).collect()
}

/// 8-bit PNG as a 3-channel image in `[0, 1]`. Gray inputs are replicated.
pub fn read_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in rgb.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f32 / 255.0;
        }
    }
    Image::new(3, w, h, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width, img.height);
    match img.channels {
        1 => {
            let buf = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| Luma([quantize(img.get(0, x as usize, y as usize))]));
            buf.save(path)?;
        }
        3 => {
            let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|c| quantize(img.get(c, x as usize, y as usize))))
            });
            buf.save(path)?;
        }
        c => return invalid(format!("cannot write a {c}-channel PNG")),
    }
    Ok(())
}

/// Depth in meters as 16-bit PNG millimeters; values beyond 65.535 m saturate.
pub fn write_depth_png(depth: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    if depth.len() != width * height {
        return invalid(format!("{width}x{height} depth map got {} values", depth.len()));
    }
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(width as u32, height as u32, |x, y| {
        let mm = (depth[y as usize * width + x as usize] as f64 * 1000.0).round();
        Luma([mm.clamp(0.0, u16::MAX as f64) as u16])
    });
    buf.save(path)?;
    Ok(())
}

pub fn read_depth_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p[0] as f32 / 1000.0).collect(), w, h))
}

/// Frames, calibration and optional ground truth of a KITTI-layout directory.
#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub frames: Vec<Image>,
    pub intrinsics: CameraIntrinsics,
    pub poses: Option<Vec<Se3Pose>>,
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("image_2").join(format!("{index:06}.png"))
}

/// Reads `image_2/000000.png, 000001.png, ...` until the first gap, plus
/// `calib.txt` and, when present, `poses.txt`.
pub fn load_sequence_dir(dir: &Path) -> Result<SequenceDir> {
    let intrinsics = load_intrinsics(&dir.join("calib.txt"))?;
    let mut frames = Vec::new();
    while frame_path(dir, frames.len()).exists() {
        frames.push(read_png(&frame_path(dir, frames.len()))?);
    }
    if frames.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no frames under {}", dir.join("image_2").display()),
        )));
    }
    let pose_file = dir.join("poses.txt");
    let poses = if pose_file.exists() {
        let p = load_kitti_poses(&pose_file)?;
        if p.len() != frames.len() {
            return invalid(format!("poses.txt has {} poses for {} frames", p.len(), frames.len()));
        }
        Some(p)
    } else {
        None
    };
    Ok(SequenceDir { frames, intrinsics, poses })
}

/// Writes a generated scene: frames, calibration, poses, 16-bit depth maps
/// under `depth/` and validity masks as JSON.
pub fn save_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("image_2"))?;
    fs::create_dir_all(dir.join("depth"))?;
    for (i, img) in scene.images.iter().enumerate() {
        write_png(img, &frame_path(dir, i))?;
        write_depth_png(&scene.depths[i], scene.width, scene.height, &dir.join("depth").join(format!("{i:06}.png")))?;
    }
    fs::write(dir.join("calib.txt"), format_calib(&scene.intrinsics))?;
    save_kitti_poses(&scene.poses, &dir.join("poses.txt"))?;
    let masks = serde_json::json!({
        "width": scene.width,
        "height": scene.height,
        "seed": scene.seed,
        "masks": scene.masks.iter().map(|m| m.iter().map(|&v| v as u8).collect::<Vec<u8>>()).collect::<Vec<_>>(),
    });
    fs::write(dir.join("masks.json"), serde_json::to_string(&masks)?)?;
    Ok(())
}
