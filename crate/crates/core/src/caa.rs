//! Contextual anchor attention.
//!
//! A feature map `d×H×W` is flattened into `N = H·W` tokens of width `d`.
//! Each token is gated channelwise by the sigmoid of the globally pooled
//! context (scaled by a learnable per-channel gain), projected to queries,
//! keys and values, and mixed by single-head scaled dot-product attention:
//!
//! ```text
//! A_v[i, c] = x[c, i] · σ(gate[c] · mean(x[c, ·]))
//! Q = A_v·W_q,  K = A_v·W_k,  V = A_v·W_v
//! F = softmax_rows(Q·Kᵀ / √d_a)
//! B = F·V
//! ```
//!
//! The output is `B` reshaped back to `d×H×W`. There is no residual path
//! inside the block.

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Dimensions of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaaConfig {
    /// Channel width of the input features.
    pub d: usize,
    /// Query/key projection width.
    pub d_a: usize,
    /// Number of spatial tokens.
    pub n: usize,
}

impl CaaConfig {
    /// Uses the default `d_a = ceil(d / 2)`.
    pub fn new(d: usize, n: usize) -> Result<Self> {
        Self::with_projection(d, d.div_ceil(2), n)
    }

    pub fn with_projection(d: usize, d_a: usize, n: usize) -> Result<Self> {
        if d == 0 || d_a == 0 || n == 0 {
            return Err(Error::invalid("caa", format!("d={d}, d_a={d_a}, n={n} must all be ≥ 1")));
        }
        Ok(Self { d, d_a, n })
    }
}

/// Learnable parameters of one attention block.
#[derive(Clone, Debug)]
pub struct CaaWeights {
    /// `d×d_a`
    pub w_q: Tensor,
    /// `d×d_a`
    pub w_k: Tensor,
    /// `d×d`
    pub w_v: Tensor,
    /// Per-channel gain applied to the pooled context, length `d`.
    pub gate: Tensor,
}

impl CaaWeights {
    pub fn init(d: usize, d_a: usize, rng: &mut RandomSource) -> Self {
        Self {
            w_q: Tensor::kaiming(&[d, d_a], d, rng),
            w_k: Tensor::kaiming(&[d, d_a], d, rng),
            w_v: Tensor::kaiming(&[d, d], d, rng),
            gate: Tensor::param(&[d], vec![0.0; d]).expect("non-empty gate"),
        }
    }

    pub fn from_tensors(w_q: Tensor, w_k: Tensor, w_v: Tensor, gate: Tensor) -> Result<Self> {
        let d = gate.numel();
        let d_a = w_q.shape().get(1).copied().unwrap_or(0);
        let ok = w_q.shape() == [d, d_a]
            && w_k.shape() == [d, d_a]
            && w_v.shape() == [d, d]
            && gate.shape() == [d];
        if !ok {
            return Err(Error::invalid(
                "caa",
                format!(
                    "inconsistent weights: W_q {:?}, W_k {:?}, W_v {:?}, gate {:?}",
                    w_q.shape(),
                    w_k.shape(),
                    w_v.shape(),
                    gate.shape()
                ),
            ));
        }
        Ok(Self { w_q, w_k, w_v, gate })
    }

    pub fn d(&self) -> usize {
        self.gate.numel()
    }

    pub fn d_a(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("gate", &self.gate),
        ]
    }
}

/// Flattens `d×H×W` features into an `N×d` token matrix gated by the pooled
/// context.
pub fn extract_context(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let &[d, h, w] = x.shape() else {
        return Err(Error::invalid("extract_context", format!("expected d×H×W, got {:?}", x.shape())));
    };
    if gate.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "extract_context",
            lhs: x.shape().to_vec(),
            rhs: gate.shape().to_vec(),
        });
    }
    let pooled = x.global_avg_pool()?;
    let modulation = gate.mul(&pooled)?.sigmoid().reshape(&[d, 1, 1])?;
    x.mul(&modulation)?.reshape(&[d, h * w])?.t()
}

/// `(Q, K, V) = A_v · (W_q, W_k, W_v)`.
pub fn project_qkv(tokens: &Tensor, w: &CaaWeights) -> Result<(Tensor, Tensor, Tensor)> {
    match tokens.shape() {
        &[_, d] if d == w.d() => {}
        s => {
            return Err(Error::ShapeMismatch {
                op: "project_qkv",
                lhs: s.to_vec(),
                rhs: w.w_v.shape().to_vec(),
            })
        }
    }
    Ok((
        tokens.matmul(&w.w_q)?,
        tokens.matmul(&w.w_k)?,
        tokens.matmul(&w.w_v)?,
    ))
}

/// Row-stochastic attention matrix `softmax(Q·Kᵀ/√d_a)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (&[n, d_a], &[m, d_k]) = (q.shape(), k.shape()) else {
        return Err(Error::invalid("attention_weights", "queries and keys must be matrices"));
    };
    if d_a != d_k {
        return Err(Error::ShapeMismatch {
            op: "attention_weights",
            lhs: vec![n, d_a],
            rhs: vec![m, d_k],
        });
    }
    if d_a == 0 {
        return Err(Error::invalid("attention_weights", "d_a must be positive"));
    }
    q.matmul(&k.t()?)?.scale(1.0 / (d_a as f64).sqrt()).softmax(1)
}

/// `B = F·V`; each output row is a convex combination of rows of `V`.
pub fn attend(f: &Tensor, v: &Tensor) -> Result<Tensor> {
    let &[n, m] = f.shape() else {
        return Err(Error::invalid("attend", format!("F must be a matrix, got {:?}", f.shape())));
    };
    if n != m || v.shape().first() != Some(&m) {
        return Err(Error::ShapeMismatch {
            op: "attend",
            lhs: f.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    {
        let data = f.data();
        for r in 0..n {
            let s: f64 = data[r * m..(r + 1) * m].iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid("attend", format!("row {r} of F sums to {s}")));
            }
        }
    }
    f.matmul(v)
}

/// Full block: context gating, projection, attention and reshape back to
/// `d×H×W`.
pub fn caa_forward(x: &Tensor, w: &CaaWeights) -> Result<Tensor> {
    caa_forward_with(x, w, true)
}

/// As [`caa_forward`]; with `self_attention == false` the attention matrix is
/// replaced by the identity, so every token only sees its own value vector.
pub fn caa_forward_with(x: &Tensor, w: &CaaWeights, self_attention: bool) -> Result<Tensor> {
    let &[d, h, wd] = x.shape() else {
        return Err(Error::invalid("caa_forward", format!("expected d×H×W, got {:?}", x.shape())));
    };
    let tokens = extract_context(x, &w.gate)?;
    let mixed = if self_attention {
        let (q, k, v) = project_qkv(&tokens, w)?;
        attend(&attention_weights(&q, &k)?, &v)?
    } else {
        tokens.matmul(&w.w_v)?
    };
    mixed.t()?.reshape(&[d, h, wd])
}
