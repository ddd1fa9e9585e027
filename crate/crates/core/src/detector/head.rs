use serde::{Deserialize, Serialize};

use crate::data::LabelRecord;
use crate::error::{Error, Result};
use crate::metrics::{BBox, Detection};
use crate::rfafpn::FeatureMap;
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Sizes predicted in log space are clamped to this range before `exp`.
pub const LOG_SIZE_CLAMP: f64 = 10.0;

/// Initial objectness bias, so early scores start near 1%.
pub const OBJECTNESS_PRIOR: f64 = -4.6;

/// Anchor-free single-level head: 3×3 conv + ReLU, then a 1×1 conv with
/// bias producing `1 + classes + 4` channels per cell in the order
/// objectness, class logits, center offsets `(x, y)`, log sizes `(w, h)`.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Tensor,
    pub out: Tensor,
    /// `[len, 1, 1]`
    pub bias: Tensor,
}

impl Head {
    pub fn init(channels: usize, len: usize, rng: &mut RandomSource) -> Self {
        let mut bias = vec![0.0; len];
        bias[0] = OBJECTNESS_PRIOR;
        Self {
            conv: Tensor::kaiming(&[channels, channels, 3, 3], channels * 9, rng),
            out: Tensor::kaiming(&[len, channels, 1, 1], channels, rng),
            bias: Tensor::param(&[len, 1, 1], bias).expect("bias shape"),
        }
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            conv: Tensor::param(&[channels, channels, 3, 3], vec![0.0; channels * channels * 9]).expect("shape"),
            out: Tensor::param(&[len, channels, 1, 1], vec![0.0; len * channels]).expect("shape"),
            bias: Tensor::param(&[len, 1, 1], vec![0.0; len]).expect("shape"),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("conv", &self.conv), ("out", &self.out), ("bias", &self.bias)]
    }

    pub fn len(&self) -> usize {
        self.bias.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[len, cells]` layout, convenient for slicing prediction components.
    pub fn forward_raw(&self, f3: &Tensor) -> Result<Tensor> {
        let &[c, h, w] = f3.shape() else {
            return Err(Error::invalid("head_forward", format!("expected C×H×W, got {:?}", f3.shape())));
        };
        if c != self.conv.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "head_forward",
                lhs: f3.shape().to_vec(),
                rhs: self.conv.shape().to_vec(),
            });
        }
        let x = f3.conv2d(&self.conv, 1, 1, 1)?.relu();
        x.conv2d(&self.out, 1, 0, 1)?.add(&self.bias)?.reshape(&[self.len(), h * w])
    }
}

/// One prediction vector per grid cell, shape `[cells, 1 + classes + 4]`,
/// cells in row-major order.
pub fn head_forward(f3: &FeatureMap, head: &Head) -> Result<Tensor> {
    head.forward_raw(&f3.data)?.t()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns `[cells, 1 + classes + 4]` raw predictions on a `grid × grid` map
/// over a square `image_size` image into detections scoring at least
/// `conf_threshold`. Score is `σ(objectness)·max σ(class)`.
pub fn decode_predictions(
    raw: &Tensor,
    grid: usize,
    num_classes: usize,
    image_size: usize,
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let k = 1 + num_classes + 4;
    if raw.shape() != [grid * grid, k] {
        return Err(Error::ShapeMismatch {
            op: "decode_predictions",
            lhs: raw.shape().to_vec(),
            rhs: vec![grid * grid, k],
        });
    }
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::invalid("decode_predictions", format!("threshold {conf_threshold} outside [0, 1]")));
    }
    let cell = image_size as f64 / grid as f64;
    let limit = image_size as f64;
    let data = raw.data();
    let mut out = Vec::new();
    for (idx, p) in data.chunks_exact(k).enumerate() {
        let (row, col) = (idx / grid, idx % grid);
        let (class_id, cls) = p[1..1 + num_classes]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
        let score = (sigmoid(p[0]) * sigmoid(cls)).clamp(0.0, 1.0);
        if score < conf_threshold {
            continue;
        }
        let t = &p[1 + num_classes..];
        let cx = (col as f64 + sigmoid(t[0])) * cell;
        let cy = (row as f64 + sigmoid(t[1])) * cell;
        let w = t[2].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp() * cell;
        let h = t[3].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp() * cell;
        let b = BBox::from_center(cx, cy, w, h);
        let bbox = BBox {
            x1: b.x1.clamp(0.0, limit),
            y1: b.y1.clamp(0.0, limit),
            x2: b.x2.clamp(0.0, limit),
            y2: b.y2.clamp(0.0, limit),
        };
        if bbox.x2 > bbox.x1 && bbox.y2 > bbox.y1 {
            out.push(Detection { class_id, score, bbox });
        }
    }
    Ok(out)
}

/// Regression targets of one object on the detection grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTarget {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    /// Center in absolute grid units `(x, y)`.
    pub center: [f64; 2],
    /// Center relative to the cell's top-left corner, in `[0, 1)`.
    pub offset: [f64; 2],
    /// `ln` of width and height in grid units.
    pub log_size: [f64; 2],
}

impl CellTarget {
    pub fn cell(&self, grid: usize) -> usize {
        self.row * grid + self.col
    }
}

pub fn encode_target(label: &LabelRecord, grid: usize) -> CellTarget {
    let g = grid as f64;
    let (x, y) = (label.cx * g, label.cy * g);
    let col = (x.floor().max(0.0) as usize).min(grid - 1);
    let row = (y.floor().max(0.0) as usize).min(grid - 1);
    CellTarget {
        row,
        col,
        class_id: label.class_id,
        center: [x, y],
        offset: [x - col as f64, y - row as f64],
        log_size: [(label.w * g).ln(), (label.h * g).ln()],
    }
}

/// One target per occupied cell; when several objects share a cell the
/// largest one wins.
pub fn assign_targets(labels: &[LabelRecord], grid: usize) -> Vec<CellTarget> {
    let mut best: Vec<Option<(f64, CellTarget)>> = vec![None; grid * grid];
    for l in labels {
        let t = encode_target(l, grid);
        let slot = &mut best[t.cell(grid)];
        if slot.is_none_or(|(a, _)| l.area() > a) {
            *slot = Some((l.area(), t));
        }
    }
    best.into_iter().flatten().map(|(_, t)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn head_shape_and_zero_output() {
        let mut rng = RandomSource::new(1);
        let head = Head::init(4, 7, &mut rng);
        let f3 = FeatureMap::new(Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng), crate::rfafpn::Role::F3).unwrap();
        let raw = head_forward(&f3, &head).unwrap();
        assert_eq!(raw.shape(), &[64, 7]);

        let zero = Head::zeros(4, 7);
        let f0 = FeatureMap::new(Tensor::zeros(&[4, 8, 8]), crate::rfafpn::Role::F3).unwrap();
        let raw = head_forward(&f0, &zero).unwrap().to_vec();
        assert!(raw.chunks(7).all(|p| sigmoid(p[0]) == 0.5));
        let bad = FeatureMap::new(Tensor::zeros(&[3, 8, 8]), crate::rfafpn::Role::F3).unwrap();
        assert!(head_forward(&bad, &head).is_err());
    }

    fn raw_with(grid: usize, k: usize, fill: impl Fn(usize, &mut [f64])) -> Tensor {
        let mut v = vec![0.0; grid * grid * k];
        for (i, p) in v.chunks_mut(k).enumerate() {
            fill(i, p);
        }
        Tensor::from_vec(&[grid * grid, k], v).unwrap()
    }

    #[test]
    fn decode_examples() {
        let off = raw_with(4, 7, |_, p| p[0] = -1e9);
        assert!(decode_predictions(&off, 4, 2, 32, 0.25).unwrap().is_empty());

        let hot = raw_with(4, 7, |i, p| p[0] = if i == 2 * 4 + 3 { 20.0 } else { -20.0 });
        let d = decode_predictions(&hot, 4, 2, 32, 0.25).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox.center(), (3.5 * 8.0, 2.5 * 8.0));
        assert_eq!((d[0].bbox.width(), d[0].bbox.height()), (8.0, 8.0));

        let all = raw_with(4, 7, |_, p| p[0] = -1e9);
        assert_eq!(decode_predictions(&all, 4, 2, 32, 0.0).unwrap().len(), 16);
    }

    #[test]
    fn encode_decode_round_trip() {
        let label = LabelRecord::new(1, 0.37, 0.61, 0.12, 0.2).unwrap();
        let grid = 16;
        let t = encode_target(&label, grid);
        let raw = raw_with(grid, 7, |i, p| {
            p[0] = -30.0;
            if i == t.cell(grid) {
                p[0] = 30.0;
                p[2] = 30.0;
                p[3] = logit(t.offset[0]);
                p[4] = logit(t.offset[1]);
                p[5] = t.log_size[0];
                p[6] = t.log_size[1];
            }
        });
        let d = decode_predictions(&raw, grid, 2, 64, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_id, 1);
        let (cx, cy) = d[0].bbox.center();
        assert!((cx - 0.37 * 64.0).abs() < 1e-9 && (cy - 0.61 * 64.0).abs() < 1e-9);
        assert!((d[0].bbox.width() / (0.12 * 64.0) - 1.0).abs() < 1e-6);
        assert!((d[0].bbox.height() / (0.2 * 64.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn larger_object_wins_a_shared_cell() {
        let a = LabelRecord::new(0, 0.51, 0.51, 0.1, 0.1).unwrap();
        let b = LabelRecord::new(1, 0.52, 0.52, 0.2, 0.2).unwrap();
        let t = assign_targets(&[a, b], 4);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].class_id, 1);
    }
}
