//! Bidirectional weighted pyramid fusion.
//!
//! One top-down pass (coarse to fine, nearest-neighbour upsampling) is
//! followed by one bottom-up pass (fine to coarse, 2×2 max pooling). Every
//! fusion node mixes its inputs with normalised non-negative edge weights and
//! then applies a depthwise-separable 3×3 convolution.

use super::feature::{FeatureMap, FeaturePyramid, Role};
use super::loss::BasisWeights;
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::monitor::{self, Normalizer};
use crate::tensor::Tensor;

pub const FUSION_EPSILON: f64 = 1e-4;

/// Raw per-edge weights of every fusion node, top-down nodes first.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub nodes: Vec<Tensor>,
    pub epsilon: f64,
}

impl FusionWeights {
    /// Normalised weights of node `i`.
    pub fn normalized(&self, i: usize) -> Result<Tensor> {
        normalize_fusion_weights(&self.nodes[i], self.epsilon)
    }
}

/// `ŵᵢ = (relu(wᵢ) + ε/n) / (Σⱼ relu(wⱼ) + ε)`.
///
/// Non-negative and summing to one; an edge with a non-positive raw weight
/// keeps only its `ε/n` share.
pub fn normalize_fusion_weights(raw: &Tensor, epsilon: f64) -> Result<Tensor> {
    let n = raw.numel() as f64;
    let r = raw.relu();
    let out = r.add_scalar(epsilon / n).div(&r.sum().add_scalar(epsilon))?;
    if monitor::is_active() {
        monitor::record(Normalizer::Fusion, &out.data());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct NodeConv {
    /// `C×1×3×3`
    pub depthwise: Tensor,
    /// `C×C×1×1`
    pub pointwise: Tensor,
}

impl NodeConv {
    fn init(c: usize, rng: &mut RandomSource) -> Self {
        Self {
            depthwise: Tensor::kaiming(&[c, 1, 3, 3], 9, rng),
            pointwise: Tensor::kaiming(&[c, c, 1, 1], c, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.shape()[0];
        x.conv2d(&self.depthwise, 1, 1, c)?.conv2d(&self.pointwise, 1, 0, 1)
    }
}

#[derive(Clone, Debug)]
pub struct BiFpn {
    pub channels: usize,
    pub levels: usize,
    pub weights: FusionWeights,
    /// One per fusion node, same order as `weights.nodes`.
    pub convs: Vec<NodeConv>,
}

impl BiFpn {
    /// Nodes: top-down for levels `L-2..=0`, then bottom-up for `1..=L-1`.
    pub fn init(channels: usize, levels: usize, rng: &mut RandomSource) -> Result<Self> {
        if levels < 2 {
            return Err(Error::invalid("bifpn", "at least two pyramid levels are required"));
        }
        let mut nodes = Vec::new();
        let mut convs = Vec::new();
        for (_, edges) in Self::layout(levels) {
            nodes.push(Tensor::param(&[edges], vec![1.0; edges])?);
            convs.push(NodeConv::init(channels, rng));
        }
        Ok(Self {
            channels,
            levels,
            weights: FusionWeights {
                nodes,
                epsilon: FUSION_EPSILON,
            },
            convs,
        })
    }

    /// `(level, incoming edge count)` for every node in evaluation order.
    pub fn layout(levels: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = (0..levels - 1).rev().map(|l| (l, 2)).collect();
        out.extend((1..levels).map(|l| (l, if l + 1 < levels { 3 } else { 2 })));
        out
    }

    pub fn node_count(&self) -> usize {
        self.convs.len()
    }

    /// The raw fusion weights, one coefficient set per node, as penalised by
    /// the sparsity term.
    pub fn basis_weights(&self) -> BasisWeights {
        BasisWeights {
            cells: self.weights.nodes.clone(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, c)) in self.weights.nodes.iter().zip(&self.convs).enumerate() {
            out.push((format!("node{i}.weights"), w));
            out.push((format!("node{i}.depthwise"), &c.depthwise));
            out.push((format!("node{i}.pointwise"), &c.pointwise));
        }
        out
    }

    fn fuse_node(&self, i: usize, inputs: &[&Tensor]) -> Result<Tensor> {
        let w = self.weights.normalized(i)?;
        if w.numel() != inputs.len() {
            return Err(Error::invalid(
                "bifpn",
                format!("node {i} has {} weights for {} inputs", w.numel(), inputs.len()),
            ));
        }
        let mut acc: Option<Tensor> = None;
        for (e, x) in inputs.iter().enumerate() {
            if x.shape() != inputs[0].shape() {
                return Err(Error::ShapeMismatch {
                    op: "bifpn",
                    lhs: inputs[0].shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            let term = x.mul(&w.narrow(e, 1)?)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        self.convs[i].forward(&acc.expect("node has inputs"))
    }

    /// Weighted input mixture of node `i` before its convolution (exposed for
    /// inspection and tests).
    pub fn node_mixture(&self, i: usize, inputs: &[&Tensor]) -> Result<Tensor> {
        let w = self.weights.normalized(i)?;
        let mut acc = inputs[0].mul(&w.narrow(0, 1)?)?;
        for (e, x) in inputs.iter().enumerate().skip(1) {
            acc = acc.add(&x.mul(&w.narrow(e, 1)?)?)?;
        }
        Ok(acc)
    }
}

/// Fuses a pyramid; output shapes equal input shapes.
pub fn bifpn_fuse(p: &FeaturePyramid, net: &BiFpn) -> Result<FeaturePyramid> {
    let l = p.len();
    if l < 2 || l != net.levels {
        return Err(Error::invalid(
            "bifpn",
            format!("pyramid has {l} levels, network expects {}", net.levels),
        ));
    }
    if p.channels() != net.channels {
        return Err(Error::ShapeMismatch {
            op: "bifpn",
            lhs: p.finest().data.shape().to_vec(),
            rhs: vec![net.channels],
        });
    }
    let inputs: Vec<&Tensor> = p.levels().iter().map(|m| &m.data).collect();
    let dims = |lvl: usize| (inputs[lvl].shape()[1], inputs[lvl].shape()[2]);

    let mut node = 0;
    let mut td: Vec<Option<Tensor>> = vec![None; l];
    td[l - 1] = Some(inputs[l - 1].clone());
    for lvl in (0..l - 1).rev() {
        let (h, w) = dims(lvl);
        let up = td[lvl + 1].as_ref().expect("coarser node computed").upsample_nearest(h, w)?;
        td[lvl] = Some(net.fuse_node(node, &[inputs[lvl], &up])?);
        node += 1;
    }

    let mut out: Vec<Tensor> = vec![td[0].clone().expect("finest node")];
    for lvl in 1..l {
        let down = out[lvl - 1].max_pool2()?;
        let fused = if lvl + 1 < l {
            let mid = td[lvl].as_ref().expect("top-down node");
            net.fuse_node(node, &[inputs[lvl], mid, &down])?
        } else {
            net.fuse_node(node, &[inputs[lvl], &down])?
        };
        out.push(fused);
        node += 1;
    }
    FeaturePyramid::new(
        out.into_iter()
            .zip(p.levels())
            .map(|(t, m)| FeatureMap::new(t, m.role))
            .collect::<Result<_>>()?,
    )
}

/// Decoder output tagged as the adversarially refined map.
pub(crate) fn finest_as_f1(p: &FeaturePyramid) -> FeatureMap {
    p.finest().with_role(Role::F1Gan)
}
