//! Plain raster types shared by the model, metrics and dataset code.

use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// 8-bit single-channel raster, row-major. Masks and edge maps use
/// 0 / 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// 8-bit interleaved RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Single-channel map with values in `[0, 1]`: predictions and soft or
/// binary ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Edge maps share the saliency representation.
pub type EdgeMap = SaliencyMap;

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(alloc::format!(
                "{width}×{height} gray image needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: alloc::vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Foreground test used for binary masks: value ≥ 128.
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.get(x, y) >= 128
    }

    /// `v / 255`
    pub fn to_saliency(&self) -> SaliencyMap {
        SaliencyMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    /// Binary `{0, 1}` version of the mask.
    pub fn to_binary(&self) -> SaliencyMap {
        SaliencyMap {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| if v >= 128 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// `[1, H, W]` binary tensor.
    pub fn to_binary_tensor(&self) -> Tensor {
        self.to_binary().to_tensor()
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(shape_err(alloc::format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Planar `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            f64::from(self.data[p * 3 + c]) / 255.0
        })
    }
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(alloc::format!(
                "{width}×{height} map needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: alloc::vec![value; width * height],
        }
    }

    /// Reads a `[1, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 1 {
            return Err(invalid(alloc::format!("expected one channel, got {c}")));
        }
        Self::new(w, h, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(alloc::vec![1, self.height, self.width], self.data.clone())
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_size(&self, other: &SaliencyMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rounds `v · 255` to the nearest byte.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
                .collect(),
        }
    }
}
