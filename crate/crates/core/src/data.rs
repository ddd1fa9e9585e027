//! Images and normalized box labels shared by augmentation, training and IO.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::tensor::Tensor;

/// One object: class id and a normalized center/size box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Slack allowed when checking that a box lies inside the unit square; covers
/// the rounding of six-decimal label files.
const BOUNDS_SLACK: f64 = 1e-6;

impl LabelRecord {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let r = Self { class_id, cx, cy, w, h };
        r.validate()?;
        Ok(r)
    }

    /// Builds a record from normalized corners.
    pub fn from_corners(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            class_id,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (x1, y1, x2, y2) = self.corners();
        let fields = [self.cx, self.cy, self.w, self.h];
        if fields.iter().any(|v| !v.is_finite()) || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Data(format!("label {self:?} has non-positive or non-finite size")));
        }
        if x1 < -BOUNDS_SLACK || y1 < -BOUNDS_SLACK || x2 > 1.0 + BOUNDS_SLACK || y2 > 1.0 + BOUNDS_SLACK {
            return Err(Error::Data(format!("label {self:?} leaves the unit square")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Box in pixels for a `width × height` image.
    pub fn to_pixels(&self, width: usize, height: usize) -> BBox {
        let (x1, y1, x2, y2) = self.corners();
        BBox {
            x1: x1 * width as f64,
            y1: y1 * height as f64,
            x2: x2 * width as f64,
            y2: y2 * height as f64,
        }
    }
}

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `3×H×W` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("consistent image shape")
    }

    /// `3×H×W` tensor with values mapped to `[-1, 1]`; the detector input.
    pub fn to_signed_tensor(&self) -> Tensor {
        self.to_tensor().scale(2.0).add_scalar(-1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: RgbImage,
    pub labels: Vec<LabelRecord>,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, image: RgbImage, labels: Vec<LabelRecord>) -> Result<Self> {
        for l in &labels {
            l.validate()?;
        }
        Ok(Self {
            id: id.into(),
            image,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn truths(&self) -> Vec<GroundTruth> {
        self.labels
            .iter()
            .map(|l| GroundTruth {
                class_id: l.class_id,
                bbox: l.to_pixels(self.width(), self.height()),
            })
            .collect()
    }
}
