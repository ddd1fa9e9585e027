use super::{count_macs, monitor, numel, Tensor};
use crate::error::{Error, Result};

/// Pointwise operation selector for [`Tensor::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Abs,
    Scale(f64),
}

/// Trailing-dimension broadcast of two shapes (size-1 extents stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape
/// `src` broadcast to `out`.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], map: Option<&[usize]>, len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(m) => {
            let mut g = vec![0.0; len];
            for (o, &i) in m.iter().enumerate() {
                g[i] += grad[o];
            }
            g
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (ma, mb) = if sa == out_shape && sb == out_shape {
            (None, None)
        } else {
            let ma = (sa != out_shape).then(|| broadcast_map(&sa, &out_shape));
            let mb = (sb != out_shape).then(|| broadcast_map(&sb, &out_shape));
            (ma, mb)
        };
        let data = {
            let (a, b) = (self.data(), other.data());
            let n = numel(&out_shape);
            (0..n)
                .map(|o| {
                    let x = a[ma.as_ref().map_or(o, |m| m[o])];
                    let y = b[mb.as_ref().map_or(o, |m| m[o])];
                    f(x, y)
                })
                .collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            name,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let (a, b) = (pa.data(), pb.data());
                let n = g.len();
                let at = |o: usize| a[ma.as_ref().map_or(o, |m| m[o])];
                let bt = |o: usize| b[mb.as_ref().map_or(o, |m| m[o])];
                let ga = needs[0].then(|| {
                    let full: Vec<f64> = (0..n).map(|o| g[o] * da(at(o), bt(o))).collect();
                    reduce_to(&full, ma.as_deref(), a.len())
                });
                let gb = needs[1].then(|| {
                    let full: Vec<f64> = (0..n).map(|o| g[o] * db(at(o), bt(o))).collect();
                    reduce_to(&full, mb.as_deref(), b.len())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Pointwise map; `df(x, y)` is the derivative given input and output.
    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out = data.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = input.data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(&out))
                        .map(|(g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn abs(&self) -> Tensor {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|g| g * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x + s).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let input = self.clone();
        let data: Vec<f64> = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        Tensor::from_op(
            "clamp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = input.data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| if x < lo || x > hi { 0.0 } else { *g })
                        .collect(),
                )]
            }),
        )
    }

    /// Dispatches one of the supported pointwise kinds.
    pub fn elementwise(kind: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let need_b = || {
            b.ok_or_else(|| Error::invalid("elementwise", format!("{kind:?} needs two operands")))
        };
        match kind {
            Elementwise::Add => a.add(need_b()?),
            Elementwise::Sub => a.sub(need_b()?),
            Elementwise::Mul => a.mul(need_b()?),
            Elementwise::Relu => Ok(a.relu()),
            Elementwise::Sigmoid => Ok(a.sigmoid()),
            Elementwise::Abs => Ok(a.abs()),
            Elementwise::Scale(s) => Ok(a.scale(s)),
        }
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    fn split_axis(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Sum over one axis; that axis is removed (rank-1 inputs give `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.split_axis(axis, "sum_axis")?;
        let mut out = vec![0.0; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += x[base + i];
                    }
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Euclidean norm over the last axis. The gradient at a zero vector is
    /// taken as zero.
    pub fn norm_last(&self) -> Tensor {
        let len = *self.shape().last().unwrap_or(&1);
        let rows = self.numel() / len;
        let norms: Vec<f64> = {
            let x = self.data();
            (0..rows)
                .map(|r| x[r * len..(r + 1) * len].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let mut shape = self.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let input = self.clone();
        let saved = norms.clone();
        Tensor::from_op(
            "norm",
            shape,
            norms,
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = input.data();
                let mut gx = vec![0.0; x.len()];
                for r in 0..rows {
                    if saved[r] > 0.0 {
                        for j in 0..len {
                            gx[r * len + j] = g[r] * x[r * len + j] / saved[r];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Tensor> {
        let [r, c] = self.dims2("transpose")?;
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape() {
            &[r, c] => Ok([r, c]),
            s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn dims3(&self, op: &'static str) -> Result<[usize; 3]> {
        match self.shape() {
            &[c, h, w] => Ok([c, h, w]),
            s => Err(Error::invalid(op, format!("expected C×H×W, got shape {s:?}"))),
        }
    }

    /// Matrix product `[M×K]·[K×N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        count_macs((m * k * n) as u64);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let (a, b) = (pa.data(), pb.data());
                // dA = dC·Bᵀ
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            ga[i * k + kk] = dot(gi, &b[kk * n..(kk + 1) * n]);
                        }
                    }
                    ga
                });
                // dB = Aᵀ·dC
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            axpy(a[i * k + kk], gi, &mut gb[kk * n..(kk + 1) * n]);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Grouped 2-D cross-correlation with zero padding.
    ///
    /// `self` is `C_in×H×W`, `kernels` is `C_out×(C_in/groups)×k×k` with `k`
    /// odd. Output is `C_out×H'×W'` with `H' = (H + 2p − k)/stride + 1`.
    pub fn conv2d(
        &self,
        kernels: &Tensor,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let [c_in, h, w] = self.dims3("conv2d")?;
        let &[c_out, c_in_g, kh, kw] = kernels.shape() else {
            return Err(Error::invalid(
                "conv2d",
                format!("kernels must be rank 4, got {:?}", kernels.shape()),
            ));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {kh}×{kw}")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be ≥ 1"));
        }
        if c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_in_g {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernels.shape().to_vec(),
            });
        }
        let geo = ConvGeometry::new(c_in, h, w, c_out, kh, stride, padding, groups)?;
        let out = geo.forward(&self.data(), &kernels.data());
        count_macs(geo.macs());
        let (pi, pk) = (self.clone(), kernels.clone());
        Ok(Tensor::from_op(
            "conv2d",
            vec![c_out, geo.oh, geo.ow],
            out,
            vec![self.clone(), kernels.clone()],
            Box::new(move |g, needs| {
                let (gi, gk) = geo.backward(&pi.data(), &pk.data(), g, needs[0], needs[1]);
                vec![gi, gk]
            }),
        ))
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.split_axis(axis, "softmax")?;
        let mut y = vec![0.0; self.numel()];
        {
            let x = self.data();
            let monitoring = monitor::is_active();
            let mut slice = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for k in 0..len {
                        let e = (x[at(k)] - max).exp();
                        y[at(k)] = e;
                        s += e;
                    }
                    for k in 0..len {
                        y[at(k)] /= s;
                        slice[k] = y[at(k)];
                    }
                    if monitoring {
                        monitor::record(monitor::Normalizer::Softmax, &slice);
                    }
                }
            }
        }
        let saved = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; saved.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dotp: f64 = (0..len).map(|k| g[at(k)] * saved[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = saved[at(k)] * (g[at(k)] - dotp);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-channel spatial mean, `C×H×W → C`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [c, h, w] = self.dims3("global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = {
            let x = self.data();
            (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
        };
        Ok(Tensor::from_op(
            "global_avg_pool",
            vec![c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    let v = g[ch] / hw as f64;
                    gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x = v);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Nearest-neighbour resize of a `C×H×W` map to `C×out_h×out_w`.
    pub fn upsample_nearest(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [c, h, w] = self.dims3("upsample_nearest")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_nearest", "target size must be positive"));
        }
        let src: Vec<usize> = (0..c * out_h * out_w)
            .map(|o| {
                let ch = o / (out_h * out_w);
                let y = (o / out_w) % out_h;
                let x = o % out_w;
                ch * h * w + (y * h / out_h) * w + (x * w / out_w)
            })
            .collect();
        let out: Vec<f64> = {
            let d = self.data();
            src.iter().map(|&i| d[i]).collect()
        };
        let n = self.numel();
        Ok(Tensor::from_op(
            "upsample_nearest",
            vec![c, out_h, out_w],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (o, &i) in src.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2×2 stride-2 max pooling with ceil-mode output `ceil(H/2)×ceil(W/2)`.
    pub fn max_pool2(&self) -> Result<Tensor> {
        let [c, h, w] = self.dims3("max_pool2")?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut arg = vec![0usize; c * oh * ow];
        let mut out = vec![0.0; c * oh * ow];
        {
            let x = self.data();
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = usize::MAX;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (y, xx) = (oy * 2 + dy, ox * 2 + dx);
                                if y < h && xx < w {
                                    let i = ch * h * w + y * w + xx;
                                    if best == usize::MAX || x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        let o = ch * oh * ow + oy * ow + ox;
                        arg[o] = best;
                        out[o] = x[best];
                    }
                }
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(
            "max_pool2",
            vec![c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let lead = self.shape()[0];
        if len == 0 || start + len > lead {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside leading extent {lead}", start + len),
            ));
        }
        let row = self.numel() / lead;
        let out = self.data()[start * row..(start + len) * row].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                gx[start * row..(start + len) * row].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lead += p.shape()[0];
            out.extend_from_slice(&p.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::from_op(
            "concat",
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&s, &need)| {
                        let r = need.then(|| g[off..off + s].to_vec());
                        off += s;
                        r
                    })
                    .collect()
            }),
        ))
    }

    /// Picks flat elements by index into a rank-1 tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if indices.is_empty() {
            return Err(Error::invalid("gather", "no indices given"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather", format!("index {bad} out of bounds for {n}")));
        }
        let out: Vec<f64> = {
            let d = self.data();
            indices.iter().map(|&i| d[i]).collect()
        };
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "gather",
            vec![indices.len()],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (o, &i) in idx.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    if alpha == 0.0 {
        return;
    }
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], row);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "output size not integral for input {h}×{w}, kernel {k}, stride {stride}, padding {pad}"
                ),
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            groups,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        })
    }

    fn macs(&self) -> u64 {
        (self.c_out * (self.c_in / self.groups) * self.k * self.k * self.oh * self.ow) as u64
    }

    fn rows(&self) -> usize {
        (self.c_in / self.groups) * self.k * self.k
    }

    /// Column matrix `[rows × oh·ow]` for one group.
    fn im2col(&self, x: &[f64], group: usize) -> Vec<f64> {
        let cg = self.c_in / self.groups;
        let p = self.oh * self.ow;
        let mut cols = vec![0.0; self.rows() * p];
        for ci in 0..cg {
            let plane = &x[(group * cg + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                row[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], group: usize, gx: &mut [f64]) {
        let cg = self.c_in / self.groups;
        let p = self.oh * self.ow;
        for ci in 0..cg {
            let plane = &mut gx[(group * cg + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], kern: &[f64]) -> Vec<f64> {
        let og = self.c_out / self.groups;
        let r = self.rows();
        let p = self.oh * self.ow;
        let mut out = Vec::with_capacity(self.c_out * p);
        for gi in 0..self.groups {
            let cols = self.im2col(x, gi);
            let wg = &kern[gi * og * r..(gi + 1) * og * r];
            out.extend(matmul_raw(wg, &cols, og, r, p));
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        kern: &[f64],
        g: &[f64],
        need_input: bool,
        need_kernel: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let og = self.c_out / self.groups;
        let r = self.rows();
        let p = self.oh * self.ow;
        let mut gx = need_input.then(|| vec![0.0; x.len()]);
        let mut gk = need_kernel.then(|| vec![0.0; kern.len()]);
        for gi in 0..self.groups {
            let gg = &g[gi * og * p..(gi + 1) * og * p];
            if let Some(gk) = gk.as_mut() {
                let cols = self.im2col(x, gi);
                for o in 0..og {
                    let go = &gg[o * p..(o + 1) * p];
                    for rr in 0..r {
                        gk[(gi * og + o) * r + rr] = dot(go, &cols[rr * p..(rr + 1) * p]);
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                let wg = &kern[gi * og * r..(gi + 1) * og * r];
                let mut dcols = vec![0.0; r * p];
                for o in 0..og {
                    let go = &gg[o * p..(o + 1) * p];
                    for rr in 0..r {
                        axpy(wg[o * r + rr], go, &mut dcols[rr * p..(rr + 1) * p]);
                    }
                }
                self.col2im(&dcols, gi, gx);
            }
        }
        (gx, gk)
    }
}
