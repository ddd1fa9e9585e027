//! Receptive-field attention convolution.
//!
//! Parallel depthwise-separable branches with different kernel sizes see the
//! same input. Each branch's globally pooled response is scored by a shared
//! learnable vector, the scores are softmax-normalised across branches, and
//! the branch outputs are summed with those weights.

use super::feature::{FeatureMap, Role};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Debug)]
pub struct RfaBranch {
    pub kernel_size: usize,
    /// `C×1×k×k`, applied per channel.
    pub depthwise: Tensor,
    /// `C×C×1×1`
    pub pointwise: Tensor,
}

impl RfaBranch {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.shape()[0];
        x.conv2d(&self.depthwise, 1, self.kernel_size / 2, c)?
            .conv2d(&self.pointwise, 1, 0, 1)
    }
}

#[derive(Clone, Debug)]
pub struct RfaConv {
    pub branches: Vec<RfaBranch>,
    /// Length-`C` vector scoring each branch's pooled response.
    pub score: Tensor,
}

impl RfaConv {
    pub fn init(channels: usize, kernel_sizes: &[usize], rng: &mut RandomSource) -> Result<Self> {
        if kernel_sizes.is_empty() || kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid("rfaconv", format!("kernel sizes {kernel_sizes:?} must be odd")));
        }
        let branches = kernel_sizes
            .iter()
            .map(|&k| RfaBranch {
                kernel_size: k,
                depthwise: Tensor::kaiming(&[channels, 1, k, k], k * k, rng),
                pointwise: Tensor::kaiming(&[channels, channels, 1, 1], channels, rng),
            })
            .collect();
        Ok(Self {
            branches,
            score: Tensor::param(&[channels], vec![0.0; channels])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.score.numel()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("score".to_string(), &self.score)];
        for b in &self.branches {
            out.push((format!("k{}.depthwise", b.kernel_size), &b.depthwise));
            out.push((format!("k{}.pointwise", b.kernel_size), &b.pointwise));
        }
        out
    }

    /// Branch outputs and their softmax weights (`[branches]`).
    pub fn branch_outputs(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let outs: Vec<Tensor> = self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<Result<_>>()?;
        for o in &outs[1..] {
            if o.shape() != outs[0].shape() {
                return Err(Error::ShapeMismatch {
                    op: "rfaconv",
                    lhs: outs[0].shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
        }
        let scores: Vec<Tensor> = outs
            .iter()
            .map(|o| Ok(o.global_avg_pool()?.mul(&self.score)?.sum()))
            .collect::<Result<_>>()?;
        let weights = Tensor::concat(&scores)?.softmax(0)?;
        Ok((outs, weights))
    }
}

/// Attention-weighted sum of the branch responses. Output keeps the input's
/// spatial size and is tagged [`Role::Rfa`].
pub fn rfaconv_forward(x: &FeatureMap, conv: &RfaConv) -> Result<FeatureMap> {
    if x.channels() != conv.channels() {
        return Err(Error::ShapeMismatch {
            op: "rfaconv",
            lhs: x.data.shape().to_vec(),
            rhs: conv.score.shape().to_vec(),
        });
    }
    let (outs, weights) = conv.branch_outputs(&x.data)?;
    let mut acc: Option<Tensor> = None;
    for (i, o) in outs.iter().enumerate() {
        let term = o.mul(&weights.narrow(i, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    FeatureMap::new(acc.expect("at least one branch"), Role::Rfa)
}
