use std::path::Path;

use super::pnm::write_ppm;
use crate::data::RgbImage;
use crate::error::Result;
use crate::metrics::{BBox, Detection};

pub const TRUTH_COLOR: [u8; 3] = [0, 255, 0];
pub const PREDICTION_COLOR: [u8; 3] = [255, 0, 0];

/// Pixels on the one-pixel outline of `b`, clipped to the image, each once.
pub fn box_outline(b: &BBox, width: usize, height: usize) -> Vec<(usize, usize)> {
    let clip = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    if b.x2 <= 0.0 || b.y2 <= 0.0 || b.x1 >= width as f64 || b.y1 >= height as f64 {
        return Vec::new();
    }
    let (x0, y0) = (clip(b.x1.floor(), width), clip(b.y1.floor(), height));
    let (x1, y1) = (clip(b.x2.ceil() - 1.0, width), clip(b.y2.ceil() - 1.0, height));
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if x == x0 || x == x1 || y == y0 || y == y1 {
                out.push((x, y));
            }
        }
    }
    out
}

/// Ground truth outlines first, predictions drawn over them.
pub fn draw_boxes(img: &RgbImage, truths: &[BBox], dets: &[Detection]) -> RgbImage {
    let mut out = img.clone();
    let strokes = truths
        .iter()
        .map(|b| (b, TRUTH_COLOR))
        .chain(dets.iter().map(|d| (&d.bbox, PREDICTION_COLOR)));
    for (b, color) in strokes {
        for (x, y) in box_outline(b, img.width, img.height) {
            out.set(x, y, color);
        }
    }
    out
}

pub fn render_detections(img: &RgbImage, truths: &[BBox], dets: &[Detection], out: &Path) -> Result<()> {
    write_ppm(out, &draw_boxes(img, truths, dets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_of_small_box() {
        let b = BBox::new(1.0, 1.0, 4.0, 3.0).unwrap();
        let mut o = box_outline(&b, 8, 8);
        o.sort();
        // 3×2 box: every pixel is on the outline
        assert_eq!(o, vec![(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)]);
        let big = BBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        assert_eq!(box_outline(&big, 8, 8).len(), 16);
    }

    #[test]
    fn zero_boxes_leave_pixels_alone() {
        let img = RgbImage::filled(4, 4, [9, 9, 9]);
        assert_eq!(draw_boxes(&img, &[], &[]), img);
    }
}
