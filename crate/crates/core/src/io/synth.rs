use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, LabelRecord, RgbImage};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
}

impl Shape {
    /// Whether the pixel at offset `(x, y)` inside an `s×s` box is covered.
    fn covers(&self, x: usize, y: usize, s: usize) -> bool {
        let (fx, fy, fs) = (x as f64 + 0.5, y as f64 + 0.5, s as f64);
        let (dx, dy) = (fx - fs / 2.0, fy - fs / 2.0);
        match self {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= fs * fs / 4.0,
            Shape::Triangle => dx.abs() <= fy / 2.0,
            Shape::Diamond => dx.abs() + dy.abs() <= fs / 2.0,
            Shape::Cross => dx.abs() <= fs / 6.0 || dy.abs() <= fs / 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    /// Per-object uniform color perturbation, in intensity levels.
    pub color_jitter: u8,
}

impl ClassStyle {
    /// Built-in palette, cycled for more than five classes.
    pub fn default_for(class_id: usize) -> Self {
        const PALETTE: [(&str, Shape, [u8; 3]); 5] = [
            ("square", Shape::Square, [205, 60, 50]),
            ("circle", Shape::Circle, [50, 95, 215]),
            ("triangle", Shape::Triangle, [235, 205, 45]),
            ("diamond", Shape::Diamond, [60, 185, 85]),
            ("cross", Shape::Cross, [170, 70, 200]),
        ];
        let (name, shape, color) = PALETTE[class_id % PALETTE.len()];
        Self {
            name: if class_id < PALETTE.len() {
                name.to_string()
            } else {
                format!("{name}{class_id}")
            },
            shape,
            color,
            color_jitter: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Empty means the built-in palette.
    pub classes: Vec<ClassStyle>,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Even object side range in pixels, inclusive.
    pub object_size: (usize, usize),
    /// Instance count of class 0 over the rarest class; intermediate classes
    /// are spaced geometrically.
    pub imbalance_ratio: f64,
    /// Ratio for the validation split; defaults to `imbalance_ratio`.
    pub val_imbalance_ratio: Option<f64>,
    pub train_images: usize,
    pub val_images: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 2,
            classes: Vec::new(),
            objects_per_image: (1, 3),
            object_size: (8, 16),
            imbalance_ratio: 4.0,
            val_imbalance_ratio: None,
            train_images: 200,
            val_images: 50,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("synthetic_spec", m));
        if self.num_classes == 0 {
            return bad("zero classes".into());
        }
        if !self.classes.is_empty() && self.classes.len() != self.num_classes {
            return bad(format!("{} class styles for {} classes", self.classes.len(), self.num_classes));
        }
        for r in [Some(self.imbalance_ratio), self.val_imbalance_ratio].into_iter().flatten() {
            if !(r >= 1.0) || !r.is_finite() {
                return bad(format!("imbalance ratio {r} must be at least 1"));
            }
        }
        let (lo, hi) = self.object_size;
        if lo < 2 || lo > hi || hi > self.image_size {
            return bad(format!("object size range {lo}..={hi} invalid for {} px images", self.image_size));
        }
        let (a, b) = self.objects_per_image;
        if a > b {
            return bad(format!("objects per image range {a}..={b} is empty"));
        }
        Ok(())
    }

    pub fn styles(&self) -> Vec<ClassStyle> {
        if self.classes.is_empty() {
            (0..self.num_classes).map(ClassStyle::default_for).collect()
        } else {
            self.classes.clone()
        }
    }

    /// Share of instances per class: proportional to `ratio^(−c/(C−1))`.
    pub fn class_shares(&self, ratio: f64) -> Vec<f64> {
        let c = self.num_classes;
        let raw: Vec<f64> = (0..c)
            .map(|k| if c == 1 { 1.0 } else { ratio.powf(-(k as f64) / (c - 1) as f64) })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: Vec<String>,
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
}

/// Largest-remainder apportionment of `total` items by `shares`.
fn apportion(total: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..shares.len()).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = total - counts.iter().sum::<usize>();
    for &k in rest.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

fn background(size: usize, rng: &mut RandomSource) -> RgbImage {
    let base: Vec<f64> = (0..3).map(|_| rng.uniform_range(80.0, 150.0)).collect();
    let tilt: Vec<f64> = (0..2).map(|_| rng.uniform_range(-30.0, 30.0)).collect();
    let period = rng.uniform_range(6.0, 14.0);
    let mut img = RgbImage::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
            let wave = 8.0 * ((x + y) as f64 / period).sin();
            let mut px = [0u8; 3];
            for c in 0..3 {
                let noise = rng.uniform_range(-14.0, 14.0);
                px[c] = (base[c] + tilt[0] * u + tilt[1] * v + wave + noise).round().clamp(0.0, 255.0) as u8;
            }
            img.set(x, y, px);
        }
    }
    img
}

fn render_image(
    id: String,
    classes: &[usize],
    spec: &SyntheticSpec,
    styles: &[ClassStyle],
    rng: &mut RandomSource,
) -> Result<AnnotatedImage> {
    let size = spec.image_size;
    let mut image = background(size, rng);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut labels = Vec::new();
    let (lo, hi) = (spec.object_size.0.div_ceil(2), spec.object_size.1 / 2);
    for &c in classes {
        let s = 2 * rng.int_range(lo, hi.max(lo));
        let mut spot = None;
        for _ in 0..100 {
            let x = rng.int_range(0, size - s);
            let y = rng.int_range(0, size - s);
            // keep a two pixel gap between objects
            let free = placed
                .iter()
                .all(|&(px, py, ps)| x + s + 2 <= px || px + ps + 2 <= x || y + s + 2 <= py || py + ps + 2 <= y);
            if free {
                spot = Some((x, y));
                break;
            }
        }
        let Some((x0, y0)) = spot else { continue };
        let style = &styles[c];
        let j = style.color_jitter as i64;
        let color: Vec<u8> = style
            .color
            .iter()
            .map(|&v| (v as i64 + rng.int_range(0, 2 * j as usize) as i64 - j).clamp(0, 255) as u8)
            .collect();
        for dy in 0..s {
            for dx in 0..s {
                if style.shape.covers(dx, dy, s) {
                    image.set(x0 + dx, y0 + dy, [color[0], color[1], color[2]]);
                }
            }
        }
        placed.push((x0, y0, s));
        let f = size as f64;
        labels.push(LabelRecord::from_corners(
            c,
            x0 as f64 / f,
            y0 as f64 / f,
            (x0 + s) as f64 / f,
            (y0 + s) as f64 / f,
        ));
    }
    AnnotatedImage::new(id, image, labels)
}

fn generate_split(spec: &SyntheticSpec, prefix: &str, n: usize, ratio: f64, rng: &RandomSource) -> Result<Vec<AnnotatedImage>> {
    let styles = spec.styles();
    let mut plan = rng.derive(0);
    let counts: Vec<usize> = (0..n)
        .map(|_| plan.int_range(spec.objects_per_image.0, spec.objects_per_image.1))
        .collect();
    let total: usize = counts.iter().sum();
    let quota = apportion(total, &spec.class_shares(ratio));
    let mut pool: Vec<usize> = quota.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    plan.shuffle(&mut pool);
    let mut next = 0;
    (0..n)
        .map(|i| {
            let classes = &pool[next..next + counts[i]];
            next += counts[i];
            let mut r = rng.derive(1 + i as u64);
            render_image(format!("{prefix}{i:05}"), classes, spec, &styles, &mut r)
        })
        .collect()
}

/// Renders the train and validation splits. Identical specs give identical
/// datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let base = RandomSource::new(spec.seed);
    let train = generate_split(spec, "train_", spec.train_images, spec.imbalance_ratio, &base.derive(1 << 32))?;
    let val_ratio = spec.val_imbalance_ratio.unwrap_or(spec.imbalance_ratio);
    let val = generate_split(spec, "val_", spec.val_images, val_ratio, &base.derive(2 << 32))?;
    Ok(SyntheticDataset {
        classes: spec.styles().into_iter().map(|s| s.name).collect(),
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_counts(images: &[AnnotatedImage], c: usize) -> Vec<usize> {
        let mut out = vec![0; c];
        for l in images.iter().flat_map(|im| &im.labels) {
            out[l.class_id] += 1;
        }
        out
    }

    #[test]
    fn balanced_counts_are_equal_within_five_percent() {
        let spec = SyntheticSpec {
            imbalance_ratio: 1.0,
            train_images: 100,
            val_images: 0,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let c = class_counts(&d.train, 2);
        let mean = (c[0] + c[1]) as f64 / 2.0;
        assert!(c.iter().all(|&k| (k as f64 - mean).abs() <= 0.05 * mean), "{c:?}");
    }

    #[test]
    fn imbalance_and_single_object_images() {
        let spec = SyntheticSpec {
            imbalance_ratio: 10.0,
            objects_per_image: (1, 1),
            train_images: 55,
            val_images: 5,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        assert!(d.train.iter().chain(&d.val).all(|im| im.labels.len() == 1));
        assert_eq!(class_counts(&d.train, 2), vec![50, 5]);
        for l in d.train.iter().flat_map(|im| &im.labels) {
            l.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let spec = SyntheticSpec {
            train_images: 5,
            val_images: 2,
            seed: 7,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
        assert!(generate_synthetic(&SyntheticSpec { num_classes: 0, ..spec.clone() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { imbalance_ratio: 0.5, ..spec }).is_err());
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(11, &[10.0 / 11.0, 1.0 / 11.0]), vec![10, 1]);
        assert_eq!(apportion(3, &[0.5, 0.5]).iter().sum::<usize>(), 3);
    }
}
