//! Independent brute-force oracles shared by the oracle and acceptance suites.
#![allow(dead_code)]

use yolors::caa::{attend, attention_weights, caa_forward, CaaWeights};
use yolors::detector::nms::nms_indices;
use yolors::metrics::{average_precision, BBox, Detection, GroundTruth};
use yolors::{RandomSource, Tensor};

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn random_vec(n: usize, rng: &mut RandomSource) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

/// `a` is `m×k`, `b` is `k×n`, both row-major.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub struct ConvCase {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

/// Direct sliding-window cross-correlation with zero padding.
pub fn naive_conv2d(x: &[f64], kern: &[f64], c: &ConvCase) -> (usize, usize, Vec<f64>) {
    let oh = (c.h + 2 * c.pad - c.k) / c.stride + 1;
    let ow = (c.w + 2 * c.pad - c.k) / c.stride + 1;
    let cig = c.c_in / c.groups;
    let cog = c.c_out / c.groups;
    let mut out = vec![0.0; c.c_out * oh * ow];
    for co in 0..c.c_out {
        let g = co / cog;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..cig {
                    let cin = g * cig + ci;
                    for ky in 0..c.k {
                        for kx in 0..c.k {
                            let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                            let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                            if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                continue;
                            }
                            let xv = x[cin * c.h * c.w + iy as usize * c.w + ix as usize];
                            let kv = kern[((co * cig + ci) * c.k + ky) * c.k + kx];
                            s += xv * kv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    (oh, ow, out)
}

/// Random geometry with integral output size: inputs up to 3×8×8, odd
/// kernels up to 5, stride in {1,2}, padding in {0,1,2}.
pub fn random_conv_case(rng: &mut RandomSource) -> ConvCase {
    loop {
        let groups = if rng.bernoulli(0.25) { rng.int_range(1, 3) } else { 1 };
        let c_in = groups * rng.int_range(1, 3 / groups);
        let c_out = groups * rng.int_range(1, 3);
        let k = [1, 3, 5][rng.int_range(0, 2)];
        let stride = rng.int_range(1, 2);
        let pad = rng.int_range(0, 2);
        let h = rng.int_range(1, 8);
        let w = rng.int_range(1, 8);
        let ok = |n: usize| n + 2 * pad >= k && (n + 2 * pad - k) % stride == 0;
        if ok(h) && ok(w) {
            return ConvCase {
                c_in,
                h,
                w,
                c_out,
                k,
                stride,
                pad,
                groups,
            };
        }
    }
}

/// `softmax(q·kᵀ/√d_a)·v` with explicit loops; `q`, `k` are `n×d_a`, `v` is `n×d`.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d_a: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d_a as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..d_a).map(|t| q[i * d_a + t] * k[j * d_a + t]).sum::<f64>() * scale)
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v[j * d + c];
            }
        }
    }
    out
}

/// Context-gated attention block computed from scratch: returns `d×H×W`.
pub fn naive_caa(x: &[f64], d: usize, h: usize, w: usize, w_q: &[f64], w_k: &[f64], w_v: &[f64], gate: &[f64], d_a: usize) -> Vec<f64> {
    let n = h * w;
    let mut tokens = vec![0.0; n * d];
    for c in 0..d {
        let mean = x[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64;
        let m = 1.0 / (1.0 + (-gate[c] * mean).exp());
        for p in 0..n {
            tokens[p * d + c] = x[c * n + p] * m;
        }
    }
    let q = naive_matmul(&tokens, w_q, n, d, d_a);
    let k = naive_matmul(&tokens, w_k, n, d, d_a);
    let v = naive_matmul(&tokens, w_v, n, d, d);
    let b = naive_attention(&q, &k, &v, n, d_a, d);
    let mut out = vec![0.0; d * n];
    for p in 0..n {
        for c in 0..d {
            out[c * n + p] = b[p * d + c];
        }
    }
    out
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly takes the best remaining box (lowest index on ties) and
/// removes every same-class box overlapping it beyond the threshold.
pub fn brute_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && dets[i].class_id == dets[b].class_id && oracle_iou(&dets[i].bbox, &dets[b].bbox) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

fn random_box(rng: &mut RandomSource, extent: f64) -> BBox {
    let x = rng.uniform_range(0.0, extent * 0.8);
    let y = rng.uniform_range(0.0, extent * 0.8);
    let w = rng.uniform_range(1.0, extent * 0.3);
    let h = rng.uniform_range(1.0, extent * 0.3);
    BBox::new(x, y, x + w, y + h).unwrap()
}

pub fn random_detections(rng: &mut RandomSource, n: usize, classes: usize, extent: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            class_id: rng.int_range(0, classes - 1),
            score: rng.uniform(),
            bbox: random_box(rng, extent),
        })
        .collect()
}

/// Truths, plus detections that are jittered copies of some truths mixed
/// with random boxes, all of one class.
pub fn random_ap_instance(rng: &mut RandomSource, max_dets: usize, max_truths: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let nt = rng.int_range(0, max_truths);
    let nd = rng.int_range(0, max_dets);
    let truths: Vec<GroundTruth> = (0..nt)
        .map(|_| GroundTruth {
            class_id: 0,
            bbox: random_box(rng, 40.0),
        })
        .collect();
    let dets = (0..nd)
        .map(|_| {
            let bbox = if !truths.is_empty() && rng.bernoulli(0.7) {
                let t = &truths[rng.int_range(0, nt - 1)].bbox;
                let j = |v: f64, rng: &mut RandomSource| v + rng.uniform_range(-1.5, 1.5);
                let (x1, y1) = (j(t.x1, rng), j(t.y1, rng));
                let x2 = j(t.x2, rng).max(x1 + 0.5);
                let y2 = j(t.y2, rng).max(y1 + 0.5);
                BBox::new(x1, y1, x2, y2).unwrap()
            } else {
                random_box(rng, 40.0)
            };
            Detection {
                class_id: 0,
                // Coarse scores so that ties occur.
                score: (rng.uniform() * 6.0).floor() / 6.0 + 0.05,
                bbox,
            }
        })
        .collect();
    (dets, truths)
}

/// Ranks detections (descending score, input order on ties), re-runs greedy
/// matching from scratch on every prefix, and interpolates precision at 101
/// recall points by maximising over all prefixes reaching each recall level.
pub fn brute_ap(dets: &[Detection], truths: &[GroundTruth], thr: f64) -> f64 {
    if truths.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut points = Vec::new();
    for len in 1..=order.len() {
        let mut taken = vec![false; truths.len()];
        let mut tp = 0;
        for &i in &order[..len] {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths.iter().enumerate() {
                let v = oracle_iou(&dets[i].bbox, &t.bbox);
                if !taken[j] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / truths.len() as f64, tp as f64 / len as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Largest relative error of `Tensor::matmul` against the triple loop.
pub fn matmul_worst(seed: u64, cases: usize) -> f64 {
    let mut rng = RandomSource::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (m, k, n) = (rng.int_range(1, 9), rng.int_range(1, 9), rng.int_range(1, 9));
        let a = random_vec(m * k, &mut rng);
        let b = random_vec(k * n, &mut rng);
        let got = Tensor::from_vec(&[m, k], a.clone())
            .unwrap()
            .matmul(&Tensor::from_vec(&[k, n], b.clone()).unwrap())
            .unwrap();
        assert_eq!(got.shape(), &[m, n]);
        for (g, e) in got.to_vec().iter().zip(naive_matmul(&a, &b, m, k, n)) {
            worst = worst.max((g - e).abs() / e.abs().max(1.0));
        }
    }
    worst
}

pub fn conv_worst(seed: u64, cases: usize) -> f64 {
    let mut rng = RandomSource::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = random_conv_case(&mut rng);
        let x = random_vec(c.c_in * c.h * c.w, &mut rng);
        let kern = random_vec(c.c_out * (c.c_in / c.groups) * c.k * c.k, &mut rng);
        let got = Tensor::from_vec(&[c.c_in, c.h, c.w], x.clone())
            .unwrap()
            .conv2d(
                &Tensor::from_vec(&[c.c_out, c.c_in / c.groups, c.k, c.k], kern.clone()).unwrap(),
                c.stride,
                c.pad,
                c.groups,
            )
            .unwrap();
        let (oh, ow, want) = naive_conv2d(&x, &kern, &c);
        assert_eq!(got.shape(), &[c.c_out, oh, ow]);
        for (g, e) in got.to_vec().iter().zip(want) {
            worst = worst.max((g - e).abs() / e.abs().max(1.0));
        }
    }
    worst
}

/// Worst error over both the bare attention product and the full block.
pub fn attention_worst(seed: u64, cases: usize) -> f64 {
    let mut rng = RandomSource::new(seed);
    let mut worst: f64 = 0.0;
    let mut note = |got: Vec<f64>, want: Vec<f64>| {
        assert_eq!(got.len(), want.len());
        for (g, e) in got.iter().zip(want) {
            worst = worst.max((g - e).abs() / e.abs().max(1.0));
        }
    };
    for _ in 0..cases {
        let (n, d_a, d) = (rng.int_range(1, 12), rng.int_range(1, 6), rng.int_range(1, 6));
        let q = random_vec(n * d_a, &mut rng);
        let k = random_vec(n * d_a, &mut rng);
        let v = random_vec(n * d, &mut rng);
        let t = |s: &[usize], v: &[f64]| Tensor::from_vec(s, v.to_vec()).unwrap();
        let f = attention_weights(&t(&[n, d_a], &q), &t(&[n, d_a], &k)).unwrap();
        let b = attend(&f, &t(&[n, d], &v)).unwrap();
        note(b.to_vec(), naive_attention(&q, &k, &v, n, d_a, d));

        let (h, w) = (rng.int_range(1, 5), rng.int_range(1, 5));
        let d_a = d.div_ceil(2);
        let x = random_vec(d * h * w, &mut rng);
        let w_q = random_vec(d * d_a, &mut rng);
        let w_k = random_vec(d * d_a, &mut rng);
        let w_v = random_vec(d * d, &mut rng);
        let gate = random_vec(d, &mut rng);
        let weights = CaaWeights::from_tensors(t(&[d, d_a], &w_q), t(&[d, d_a], &w_k), t(&[d, d], &w_v), t(&[d], &gate)).unwrap();
        let got = caa_forward(&t(&[d, h, w], &x), &weights).unwrap();
        assert_eq!(got.shape(), &[d, h, w]);
        note(got.to_vec(), naive_caa(&x, d, h, w, &w_q, &w_k, &w_v, &gate, d_a));
    }
    worst
}

/// Number of instances where NMS disagrees with the brute-force oracle.
pub fn nms_mismatches(seed: u64, cases: usize) -> usize {
    let mut rng = RandomSource::new(seed);
    (0..cases)
        .filter(|_| {
            let n = rng.int_range(0, 25);
            let classes = rng.int_range(1, 3);
            let mut dets = random_detections(&mut rng, n, classes, 30.0);
            // Repeat some scores to exercise tie-breaking.
            for d in dets.iter_mut() {
                if rng.bernoulli(0.3) {
                    d.score = 0.5;
                }
            }
            let thr = rng.uniform_range(0.1, 0.9);
            let mut got = nms_indices(&dets, thr);
            let mut want = brute_nms(&dets, thr);
            got.sort_unstable();
            want.sort_unstable();
            got != want
        })
        .count()
}

pub fn ap_worst(seed: u64, cases: usize) -> f64 {
    let mut rng = RandomSource::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (dets, truths) = random_ap_instance(&mut rng, 10, 5);
        let thr = [0.5, 0.3, 0.75][rng.int_range(0, 2)];
        let got = average_precision(&dets, &truths, thr).ap;
        worst = worst.max((got - brute_ap(&dets, &truths, thr)).abs());
    }
    worst
}
