//! Planar floating-point images.

use crate::error::{invalid, Result};
use orbvo_autodiff::Tensor;

/// Planar image with values nominally in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return invalid(format!("empty image {channels}x{width}x{height}"));
        }
        if data.len() != channels * width * height {
            return invalid(format!(
                "{channels}x{width}x{height} image needs {} values, got {}",
                channels * width * height,
                data.len()
            ));
        }
        Ok(Self { channels, width, height, data })
    }

    pub fn filled(channels: usize, width: usize, height: usize, v: f32) -> Self {
        Self { channels, width, height, data: vec![v; channels * width * height] }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `[1, c, h, w]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("image buffer matches its dimensions")
    }
}

/// Single-channel luminance image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid("gray image must be at least 1x1");
        }
        if values.len() != width * height {
            return invalid(format!("{width}x{height} gray image got {} values", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return invalid(format!("gray value {v} outside [0, 1]"));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self { width, height, values }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub(crate) fn at_i(&self, x: isize, y: isize) -> f32 {
        self.values[y as usize * self.width + x as usize]
    }
}

/// BT.601 luminance of a 3-channel image.
pub fn to_grayscale(rgb: &Image) -> Result<GrayImage> {
    if rgb.channels != 3 {
        return invalid(format!("expected 3 channels, got {}", rgb.channels));
    }
    if rgb.data.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite pixel value");
    }
    let (r, g, b) = (rgb.plane(0), rgb.plane(1), rgb.plane(2));
    let values = (0..rgb.width * rgb.height)
        .map(|i| (0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).clamp(0.0, 1.0))
        .collect();
    Ok(GrayImage { width: rgb.width, height: rgb.height, values })
}
