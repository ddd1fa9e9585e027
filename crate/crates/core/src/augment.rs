//! Class-frequency driven augmentation: rarity-scaled contrast, minority
//! sample mixing, geometric transforms and the combined set builder.

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, LabelRecord, RgbImage};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Instance counts per class id over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    counts: Vec<u64>,
}

impl ClassFrequencyTable {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::Data("class frequency table without instances".into()));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `count_c / max count`; zero for classes that never occur.
    pub fn frequency(&self, class_id: usize) -> f64 {
        let max = *self.counts.iter().max().unwrap_or(&0);
        match self.counts.get(class_id) {
            Some(&c) if max > 0 => c as f64 / max as f64,
            _ => 0.0,
        }
    }

    /// Present classes with frequency below one.
    pub fn is_minority(&self, class_id: usize) -> bool {
        let f = self.frequency(class_id);
        f > 0.0 && f < 1.0
    }

    pub fn minority_classes(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| self.is_minority(c)).collect()
    }
}

pub fn compute_class_frequencies(dataset: &[AnnotatedImage]) -> Result<ClassFrequencyTable> {
    let n = dataset
        .iter()
        .flat_map(|im| im.labels.iter().map(|l| l.class_id + 1))
        .max()
        .unwrap_or(0);
    let mut counts = vec![0u64; n];
    for l in dataset.iter().flat_map(|im| &im.labels) {
        counts[l.class_id] += 1;
    }
    ClassFrequencyTable::from_counts(counts)
}

/// `1 + strength·(1 − f_min)` over the classes present in `labels`; one when
/// there are no labels.
pub fn contrast_gamma(labels: &[LabelRecord], table: &ClassFrequencyTable, strength: f64) -> f64 {
    let f_min = labels
        .iter()
        .map(|l| table.frequency(l.class_id))
        .fold(f64::INFINITY, f64::min);
    if f_min.is_finite() {
        1.0 + strength * (1.0 - f_min)
    } else {
        1.0
    }
}

pub const CONTRAST_PIVOT: f64 = 128.0;

pub fn contrast_adjust(img: &AnnotatedImage, table: &ClassFrequencyTable, strength: f64) -> Result<AnnotatedImage> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::invalid("contrast_adjust", format!("strength {strength} must be non-negative")));
    }
    let gamma = contrast_gamma(&img.labels, table, strength);
    let mut out = img.clone();
    if gamma != 1.0 {
        for v in &mut out.image.pixels {
            *v = (CONTRAST_PIVOT + gamma * (*v as f64 - CONTRAST_PIVOT)).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecipe {
    pub donor: String,
    pub recipient: String,
    pub beta: f64,
    /// Labels of the relocated objects in the output image.
    pub pasted: Vec<LabelRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixParams {
    /// Symmetric Beta distribution parameter.
    pub beta_param: f64,
    /// Overrides the sampled blend coefficient.
    pub forced_beta: Option<f64>,
    /// Width of the blended ring around a pasted crop, relative to the crop's longer side.
    pub margin_fraction: f64,
    pub max_attempts: usize,
}

impl Default for MixParams {
    fn default() -> Self {
        Self {
            beta_param: 1.0,
            forced_beta: None,
            margin_fraction: 0.25,
            max_attempts: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixOutcome {
    pub image: AnnotatedImage,
    pub recipe: MixRecipe,
    pub warnings: Vec<String>,
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Rect {
    fn of_label(l: &LabelRecord, w: usize, h: usize) -> Rect {
        let b = l.to_pixels(w, h);
        Rect {
            x0: (b.x1.floor() as i64).clamp(0, w as i64),
            y0: (b.y1.floor() as i64).clamp(0, h as i64),
            x1: (b.x2.ceil() as i64).clamp(0, w as i64),
            y1: (b.y2.ceil() as i64).clamp(0, h as i64),
        }
    }

    fn intersects(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Relocates each minority object of `donor` into `recipient` at a uniformly
/// drawn position whose surrounding ring avoids every existing box. The crop
/// itself is copied; the ring is blended as `β·recipient + (1−β)·donor`.
pub fn mix_samples(
    donor: &AnnotatedImage,
    recipient: &AnnotatedImage,
    table: &ClassFrequencyTable,
    rng: &mut RandomSource,
    params: &MixParams,
) -> Result<MixOutcome> {
    if !(params.beta_param > 0.0) {
        return Err(Error::invalid("mix_samples", "beta parameter must be positive"));
    }
    let beta = match params.forced_beta {
        Some(b) if (0.0..=1.0).contains(&b) => b,
        Some(b) => return Err(Error::invalid("mix_samples", format!("beta {b} outside [0, 1]"))),
        None => rng.beta(params.beta_param),
    };
    let (wr, hr) = (recipient.width(), recipient.height());
    let mut out = recipient.clone();
    let mut occupied: Vec<Rect> = recipient.labels.iter().map(|l| Rect::of_label(l, wr, hr)).collect();
    let mut pasted = Vec::new();
    let mut warnings = Vec::new();

    let candidates: Vec<&LabelRecord> = donor.labels.iter().filter(|l| table.is_minority(l.class_id)).collect();
    if candidates.is_empty() {
        warnings.push(format!("donor {} has no minority objects", donor.id));
    }
    for label in candidates {
        let src = Rect::of_label(label, donor.width(), donor.height());
        let (cw, ch) = (src.x1 - src.x0, src.y1 - src.y0);
        if cw <= 0 || ch <= 0 || cw > wr as i64 || ch > hr as i64 {
            warnings.push(format!("object {label:?} does not fit the recipient"));
            continue;
        }
        let margin = ((params.margin_fraction * cw.max(ch) as f64).round() as i64).max(1);
        let mut placed = None;
        for _ in 0..params.max_attempts {
            let px = rng.int_range(0, (wr as i64 - cw) as usize) as i64;
            let py = rng.int_range(0, (hr as i64 - ch) as usize) as i64;
            let ring = Rect {
                x0: px - margin,
                y0: py - margin,
                x1: px + cw + margin,
                y1: py + ch + margin,
            };
            if !occupied.iter().any(|o| o.intersects(&ring)) {
                placed = Some((px, py, ring));
                break;
            }
        }
        let Some((px, py, ring)) = placed else {
            warnings.push(format!(
                "no free placement for class {} after {} attempts",
                label.class_id, params.max_attempts
            ));
            continue;
        };
        let target = Rect {
            x0: px,
            y0: py,
            x1: px + cw,
            y1: py + ch,
        };
        for y in ring.y0.max(0)..ring.y1.min(hr as i64) {
            for x in ring.x0.max(0)..ring.x1.min(wr as i64) {
                let sx = src.x0 + (x - px);
                let sy = src.y0 + (y - py);
                if sx < 0 || sy < 0 || sx >= donor.width() as i64 || sy >= donor.height() as i64 {
                    continue;
                }
                let d = donor.image.get(sx as usize, sy as usize);
                if target.contains(x, y) {
                    out.image.set(x as usize, y as usize, d);
                } else {
                    let r = out.image.get(x as usize, y as usize);
                    let mut px_out = [0u8; 3];
                    for c in 0..3 {
                        px_out[c] = (beta * r[c] as f64 + (1.0 - beta) * d[c] as f64).round().clamp(0.0, 255.0) as u8;
                    }
                    out.image.set(x as usize, y as usize, px_out);
                }
            }
        }
        let rec = LabelRecord::from_corners(
            label.class_id,
            px as f64 / wr as f64,
            py as f64 / hr as f64,
            (px + cw) as f64 / wr as f64,
            (py + ch) as f64 / hr as f64,
        );
        occupied.push(target);
        out.labels.push(rec);
        pasted.push(rec);
    }
    Ok(MixOutcome {
        recipe: MixRecipe {
            donor: donor.id.clone(),
            recipient: recipient.id.clone(),
            beta,
            pasted,
        },
        image: out,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricOp {
    Crop,
    Scale,
    Rotate90,
    Hflip,
    Vflip,
}

impl GeometricOp {
    pub const ALL: [GeometricOp; 5] = [Self::Crop, Self::Scale, Self::Rotate90, Self::Hflip, Self::Vflip];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Crop => "crop",
            Self::Scale => "scale",
            Self::Rotate90 => "rotate90",
            Self::Hflip => "hflip",
            Self::Vflip => "vflip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::invalid("geometric_op", format!("unknown op `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricParams {
    /// Crop side as a fraction of the image side is drawn from `[this, 1]`.
    pub crop_min_fraction: f64,
    pub scale_range: (f64, f64),
    /// Boxes keeping less than this fraction of their area are dropped.
    pub min_area_kept: f64,
    pub fill: u8,
}

impl Default for GeometricParams {
    fn default() -> Self {
        Self {
            crop_min_fraction: 0.6,
            scale_range: (0.75, 1.25),
            min_area_kept: 0.5,
            fill: 114,
        }
    }
}

/// Smallest accepted crop window side in pixels.
pub const MIN_CROP_SIDE: usize = 8;

/// Applies each op in `ops`, in order. Flips and rotation are deterministic;
/// crop and scale draw their parameters from `rng`.
pub fn geometric_augment(img: &AnnotatedImage, rng: &mut RandomSource, ops: &[GeometricOp]) -> Result<AnnotatedImage> {
    geometric_augment_with(img, rng, ops, &GeometricParams::default())
}

pub fn geometric_augment_with(
    img: &AnnotatedImage,
    rng: &mut RandomSource,
    ops: &[GeometricOp],
    params: &GeometricParams,
) -> Result<AnnotatedImage> {
    let mut cur = img.clone();
    for op in ops {
        cur = match op {
            GeometricOp::Hflip => hflip(&cur),
            GeometricOp::Vflip => vflip(&cur),
            GeometricOp::Rotate90 => rotate90(&cur),
            GeometricOp::Crop => {
                let f = rng.uniform_range(params.crop_min_fraction, 1.0);
                let cw = (f * cur.width() as f64).round() as usize;
                let ch = (f * cur.height() as f64).round() as usize;
                if cw < MIN_CROP_SIDE || ch < MIN_CROP_SIDE {
                    return Err(Error::invalid(
                        "geometric_augment",
                        format!("crop window {cw}x{ch} is smaller than {MIN_CROP_SIDE}x{MIN_CROP_SIDE}"),
                    ));
                }
                let ox = rng.int_range(0, cur.width() - cw);
                let oy = rng.int_range(0, cur.height() - ch);
                let (w, h) = (cur.width() as f64, cur.height() as f64);
                let ax = w / cw as f64;
                let ay = h / ch as f64;
                affine(&cur, [ax, -(ox as f64) / cw as f64, ay, -(oy as f64) / ch as f64], params)
            }
            GeometricOp::Scale => {
                let s = rng.uniform_range(params.scale_range.0, params.scale_range.1);
                affine(&cur, [s, 0.5 * (1.0 - s), s, 0.5 * (1.0 - s)], params)
            }
        };
    }
    Ok(cur)
}

fn hflip(img: &AnnotatedImage) -> AnnotatedImage {
    let mut out = img.clone();
    let w = img.width();
    for y in 0..img.height() {
        for x in 0..w {
            out.image.set(x, y, img.image.get(w - 1 - x, y));
        }
    }
    for l in &mut out.labels {
        l.cx = 1.0 - l.cx;
    }
    out
}

fn vflip(img: &AnnotatedImage) -> AnnotatedImage {
    let mut out = img.clone();
    let h = img.height();
    for y in 0..h {
        for x in 0..img.width() {
            out.image.set(x, y, img.image.get(x, h - 1 - y));
        }
    }
    for l in &mut out.labels {
        l.cy = 1.0 - l.cy;
    }
    out
}

/// Quarter turn counter-clockwise: normalized `(x, y)` maps to `(y, 1 − x)`.
fn rotate90(img: &AnnotatedImage) -> AnnotatedImage {
    let (w, h) = (img.width(), img.height());
    let mut pixels = RgbImage::filled(h, w, [0, 0, 0]);
    for yo in 0..w {
        for xo in 0..h {
            pixels.set(xo, yo, img.image.get(w - 1 - yo, xo));
        }
    }
    let labels = img
        .labels
        .iter()
        .map(|l| LabelRecord {
            class_id: l.class_id,
            cx: l.cy,
            cy: 1.0 - l.cx,
            w: l.h,
            h: l.w,
        })
        .collect();
    AnnotatedImage {
        id: img.id.clone(),
        image: pixels,
        labels,
    }
}

/// Resamples so that normalized input `u` lands at `a·u + b` per axis
/// (`m = [ax, bx, ay, by]`), nearest neighbour, `fill` outside the source.
fn affine(img: &AnnotatedImage, m: [f64; 4], params: &GeometricParams) -> AnnotatedImage {
    let [ax, bx, ay, by] = m;
    let (w, h) = (img.width(), img.height());
    let mut pixels = RgbImage::filled(w, h, [params.fill; 3]);
    for y in 0..h {
        let v = ((y as f64 + 0.5) / h as f64 - by) / ay;
        let sy = (v * h as f64).floor();
        if sy < 0.0 || sy >= h as f64 {
            continue;
        }
        for x in 0..w {
            let u = ((x as f64 + 0.5) / w as f64 - bx) / ax;
            let sx = (u * w as f64).floor();
            if sx >= 0.0 && sx < w as f64 {
                pixels.set(x, y, img.image.get(sx as usize, sy as usize));
            }
        }
    }
    let labels = img
        .labels
        .iter()
        .filter_map(|l| {
            let (x1, y1, x2, y2) = l.corners();
            let (x1, x2) = (ax * x1 + bx, ax * x2 + bx);
            let (y1, y2) = (ay * y1 + by, ay * y2 + by);
            let full = (x2 - x1) * (y2 - y1);
            let (cx1, cy1, cx2, cy2) = (x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0));
            if cx2 <= cx1 || cy2 <= cy1 || (cx2 - cx1) * (cy2 - cy1) < params.min_area_kept * full {
                None
            } else {
                Some(LabelRecord::from_corners(l.class_id, cx1, cy1, cx2, cy2))
            }
        })
        .collect();
    AnnotatedImage {
        id: img.id.clone(),
        image: pixels,
        labels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Output holds `multiplier × |dataset|` samples; one keeps the input as is.
    pub multiplier: usize,
    pub strength: f64,
    pub beta_param: f64,
    /// Each op is applied to a generated sample with probability one half.
    pub geometric: Vec<GeometricOp>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            multiplier: 2,
            strength: 0.5,
            beta_param: 1.0,
            geometric: vec![GeometricOp::Hflip, GeometricOp::Vflip],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub id: String,
    pub seed: u64,
    pub recipient: String,
    pub donor: Option<String>,
    pub beta: Option<f64>,
    pub pasted: Vec<LabelRecord>,
    pub gamma: f64,
    pub ops: Vec<GeometricOp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub base_seed: u64,
    pub rng: String,
    pub config: AugmentConfig,
    pub originals: usize,
    pub generated: Vec<GeneratedSample>,
}

impl AugmentManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSet {
    pub images: Vec<AnnotatedImage>,
    pub manifest: AugmentManifest,
}

/// Returns the originals followed by `(multiplier − 1)·|dataset|` generated
/// samples. Sample `g` uses the stream derived from `rng` with index `g`; it
/// recycles original `g mod |dataset|` as recipient, pastes the minority
/// objects of a random donor, adjusts contrast and applies random geometric ops.
pub fn build_augmented_set(
    dataset: &[AnnotatedImage],
    table: &ClassFrequencyTable,
    config: &AugmentConfig,
    rng: &RandomSource,
) -> Result<AugmentedSet> {
    if config.multiplier == 0 {
        return Err(Error::invalid("build_augmented_set", "multiplier must be at least 1"));
    }
    let donors: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].labels.iter().any(|l| table.is_minority(l.class_id)))
        .collect();
    let mix_params = MixParams {
        beta_param: config.beta_param,
        ..MixParams::default()
    };
    let mut images = dataset.to_vec();
    let mut generated = Vec::new();
    for g in 0..(config.multiplier - 1) * dataset.len() {
        let mut r = rng.derive(g as u64);
        let recipient = &dataset[g % dataset.len()];
        let (mut sample, donor, beta, pasted, warnings) = if donors.is_empty() {
            (recipient.clone(), None, None, vec![], vec![])
        } else {
            let d = &dataset[donors[r.int_range(0, donors.len() - 1)]];
            let m = mix_samples(d, recipient, table, &mut r, &mix_params)?;
            (m.image, Some(d.id.clone()), Some(m.recipe.beta), m.recipe.pasted, m.warnings)
        };
        let gamma = contrast_gamma(&sample.labels, table, config.strength);
        sample = contrast_adjust(&sample, table, config.strength)?;
        let ops: Vec<GeometricOp> = config.geometric.iter().copied().filter(|_| r.bernoulli(0.5)).collect();
        sample = geometric_augment(&sample, &mut r, &ops)?;
        sample.id = format!("{}_aug{g}", recipient.id);
        generated.push(GeneratedSample {
            id: sample.id.clone(),
            seed: r.seed(),
            recipient: recipient.id.clone(),
            donor,
            beta,
            pasted,
            gamma,
            ops,
            warnings,
        });
        images.push(sample);
    }
    Ok(AugmentedSet {
        images,
        manifest: AugmentManifest {
            base_seed: rng.seed(),
            rng: rng.algorithm_id().to_string(),
            config: config.clone(),
            originals: dataset.len(),
            generated,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str, w: usize, h: usize, seed: u64, labels: Vec<LabelRecord>) -> AnnotatedImage {
        let mut r = RandomSource::new(seed);
        let px = (0..w * h * 3).map(|_| r.int_range(0, 255) as u8).collect();
        AnnotatedImage::new(id, RgbImage::new(w, h, px).unwrap(), labels).unwrap()
    }

    fn lab(c: usize, cx: f64, cy: f64, w: f64, h: f64) -> LabelRecord {
        LabelRecord::new(c, cx, cy, w, h).unwrap()
    }

    #[test]
    fn frequency_examples() {
        let t = ClassFrequencyTable::from_counts(vec![10, 10]).unwrap();
        assert_eq!((t.frequency(0), t.frequency(1)), (1.0, 1.0));
        let t = ClassFrequencyTable::from_counts(vec![100, 25]).unwrap();
        assert_eq!((t.frequency(0), t.frequency(1)), (1.0, 0.25));
        assert_eq!(t.minority_classes(), vec![1]);
        let one = vec![image("a", 8, 8, 1, vec![lab(0, 0.5, 0.5, 0.2, 0.2)])];
        assert_eq!(compute_class_frequencies(&one).unwrap().frequency(0), 1.0);
        let empty = vec![image("a", 8, 8, 1, vec![])];
        assert!(compute_class_frequencies(&empty).is_err());
    }

    #[test]
    fn contrast_examples() {
        let t = ClassFrequencyTable::from_counts(vec![100, 25]).unwrap();
        let mut img = image("a", 2, 1, 2, vec![lab(1, 0.5, 0.5, 0.2, 0.2)]);
        img.image.pixels = vec![178, 128, 0, 255, 100, 50];
        let out = contrast_adjust(&img, &t, 0.8).unwrap();
        assert!((contrast_gamma(&img.labels, &t, 0.8) - 1.6).abs() < 1e-15);
        assert_eq!(out.image.pixels[0], 208);
        assert_eq!(out.image.pixels[1], 128);
        assert_eq!(out.image.pixels[2], 0);
        assert_eq!(out.image.pixels[3], 255);
        assert_eq!(out.labels, img.labels);
        assert_eq!(contrast_adjust(&img, &t, 0.0).unwrap(), img);
        let balanced = ClassFrequencyTable::from_counts(vec![5, 5]).unwrap();
        assert_eq!(contrast_adjust(&img, &balanced, 0.8).unwrap(), img);
        assert!(contrast_adjust(&img, &t, -1.0).is_err());
    }

    #[test]
    fn mixing_pastes_one_object_into_empty_recipient() {
        let t = ClassFrequencyTable::from_counts(vec![10, 1]).unwrap();
        let donor = image("d", 32, 32, 3, vec![lab(1, 0.25, 0.25, 0.25, 0.25), lab(0, 0.75, 0.75, 0.2, 0.2)]);
        let recipient = image("r", 32, 32, 4, vec![]);
        let m = mix_samples(&donor, &recipient, &t, &mut RandomSource::new(5), &MixParams::default()).unwrap();
        assert_eq!(m.image.labels.len(), 1);
        assert_eq!(m.recipe.pasted.len(), 1);
        let l = m.image.labels[0];
        assert_eq!(l.class_id, 1);
        assert!((l.w - 0.25).abs() < 1e-12 && (l.h - 0.25).abs() < 1e-12);
        l.validate().unwrap();
        // the pasted crop reproduces the donor pixels exactly
        let px0 = (l.cx - l.w / 2.0) * 32.0;
        let py0 = (l.cy - l.h / 2.0) * 32.0;
        for dy in 0..8 {
            for dx in 0..8 {
                assert_eq!(
                    m.image.image.get(px0 as usize + dx, py0 as usize + dy),
                    donor.image.get(4 + dx, 4 + dy)
                );
            }
        }
    }

    #[test]
    fn mixing_without_placement_and_unit_beta_is_identity() {
        let t = ClassFrequencyTable::from_counts(vec![10, 1]).unwrap();
        let donor = image("d", 16, 16, 6, vec![lab(1, 0.5, 0.5, 0.5, 0.5)]);
        let recipient = image("r", 16, 16, 7, vec![lab(0, 0.5, 0.5, 0.9, 0.9)]);
        let p = MixParams {
            forced_beta: Some(1.0),
            ..MixParams::default()
        };
        let m = mix_samples(&donor, &recipient, &t, &mut RandomSource::new(8), &p).unwrap();
        assert_eq!(m.image, recipient);
        assert_eq!(m.warnings.len(), 1);
        let plain = image("p", 16, 16, 9, vec![lab(0, 0.5, 0.5, 0.2, 0.2)]);
        let m = mix_samples(&plain, &recipient, &t, &mut RandomSource::new(8), &p).unwrap();
        assert_eq!(m.image, recipient);
    }

    #[test]
    fn mixing_is_deterministic() {
        let t = ClassFrequencyTable::from_counts(vec![10, 1]).unwrap();
        let donor = image("d", 32, 32, 10, vec![lab(1, 0.3, 0.3, 0.2, 0.2), lab(1, 0.7, 0.7, 0.1, 0.1)]);
        let recipient = image("r", 32, 32, 11, vec![lab(0, 0.5, 0.5, 0.2, 0.2)]);
        let run = || mix_samples(&donor, &recipient, &t, &mut RandomSource::new(12), &MixParams::default()).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn flips_and_rotation() {
        let img = image("a", 6, 4, 13, vec![lab(0, 0.2, 0.3, 0.2, 0.4)]);
        let mut r = RandomSource::new(0);
        let once = geometric_augment(&img, &mut r, &[GeometricOp::Hflip]).unwrap();
        assert!((once.labels[0].cx - 0.8).abs() < 1e-12);
        let twice = geometric_augment(&once, &mut r, &[GeometricOp::Hflip]).unwrap();
        assert_eq!(twice.image, img.image);
        assert!((twice.labels[0].cx - 0.2).abs() < 1e-12);
        let v2 = geometric_augment(&img, &mut r, &[GeometricOp::Vflip, GeometricOp::Vflip]).unwrap();
        assert_eq!(v2.image, img.image);

        let centered = image("c", 6, 4, 14, vec![lab(0, 0.5, 0.5, 0.2, 0.6)]);
        let rot = geometric_augment(&centered, &mut r, &[GeometricOp::Rotate90]).unwrap();
        assert_eq!((rot.width(), rot.height()), (4, 6));
        let l = rot.labels[0];
        assert!((l.cx - 0.5).abs() < 1e-12 && (l.cy - 0.5).abs() < 1e-12);
        assert!((l.w - 0.6).abs() < 1e-12 && (l.h - 0.2).abs() < 1e-12);
        let four = geometric_augment(&centered, &mut r, &[GeometricOp::Rotate90; 4]).unwrap();
        assert_eq!(four.image, centered.image);
    }

    #[test]
    fn crop_and_scale_keep_labels_valid() {
        let img = image("a", 32, 32, 15, vec![lab(0, 0.1, 0.1, 0.1, 0.1), lab(1, 0.5, 0.5, 0.3, 0.3)]);
        for seed in 0..50 {
            let out = geometric_augment(&img, &mut RandomSource::new(seed), &[GeometricOp::Crop, GeometricOp::Scale]).unwrap();
            assert_eq!((out.width(), out.height()), (32, 32));
            for l in &out.labels {
                l.validate().unwrap();
            }
        }
        let tiny = image("t", 6, 6, 16, vec![]);
        assert!(geometric_augment(&tiny, &mut RandomSource::new(1), &[GeometricOp::Crop]).is_err());
    }

    #[test]
    fn augmented_set_identity_and_minority_share() {
        let mut data = Vec::new();
        for i in 0..10 {
            let mut labels = vec![lab(0, 0.2, 0.2, 0.15, 0.15)];
            if i == 0 {
                labels.push(lab(1, 0.7, 0.7, 0.15, 0.15));
            }
            data.push(image(&format!("i{i}"), 32, 32, 20 + i, labels));
        }
        let t = compute_class_frequencies(&data).unwrap();
        let rng = RandomSource::new(3);
        let id = AugmentConfig {
            multiplier: 1,
            strength: 0.0,
            ..AugmentConfig::default()
        };
        assert_eq!(build_augmented_set(&data, &t, &id, &rng).unwrap().images, data);

        let cfg = AugmentConfig::default();
        let out = build_augmented_set(&data, &t, &cfg, &rng).unwrap();
        assert_eq!(out.images.len(), 20);
        let count = |c: usize| out.images.iter().flat_map(|im| &im.labels).filter(|l| l.class_id == c).count();
        let share = count(1) as f64 / (count(0) + count(1)) as f64;
        assert!(share > 1.0 / 11.0, "{share}");
        assert!(count(0) >= 10 && count(1) >= 1);
        let again = build_augmented_set(&data, &t, &cfg, &rng).unwrap();
        assert_eq!(again.manifest.to_json().unwrap(), out.manifest.to_json().unwrap());
        assert_eq!(again.images, out.images);
    }
}
