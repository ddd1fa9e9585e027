//! Finite-difference checks over every differentiable operation and the
//! composed attention, receptive-field, fusion and loss blocks.
//!
//! Each case reduces its output to a scalar through a fixed random
//! projection so that no gradient component cancels by symmetry.

use crate::caa::{caa_forward_with, CaaWeights};
use crate::error::Result;
use crate::rfafpn::{
    bifpn_fuse, composite_loss, confidence_loss, coordinate_loss, discriminator_loss, generator_loss,
    normalize_fusion_weights, rfaconv_forward, sparsity_loss, BasisWeights, BiFpn, CellAssignment, Discriminator,
    FeatureMap, FeaturePyramid, LossWeights, RfaConv, Role,
};
use crate::rng::RandomSource;
use crate::tensor::{grad_check, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Copy)]
enum Gen {
    Rand,
    OffZero,
    Positive,
}

struct Suite {
    rng: RandomSource,
    eps: f64,
    cases: Vec<GradCase>,
}

impl Suite {
    fn rand(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut self.rng)
    }

    /// Values with magnitude in `[0.1, 1]`, clear of the kinks at zero.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = self.rng.uniform_range(0.1, 1.0);
                if self.rng.bernoulli(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::from_vec(shape, v).expect("shape matches")
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, 0.5, 2.0, &mut self.rng)
    }

    fn gen_check<F>(&mut self, name: &str, gen: Gen, shape: &[usize], f: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        let x = match gen {
            Gen::Rand => self.rand(shape),
            Gen::OffZero => self.off_zero(shape),
            Gen::Positive => self.positive(shape),
        };
        self.check(name, x, f)
    }

    /// `Σ f(x) ⊙ R` for a fixed random `R` matching the output shape.
    fn check<F>(&mut self, name: &str, x: Tensor, f: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        let probe = crate::tensor::no_grad(|| f(&x))?;
        let proj = Tensor::uniform(probe.shape(), 0.5, 1.5, &mut self.rng);
        let err = grad_check(|t| Ok(f(t)?.mul(&proj)?.sum()), &x, self.eps)?;
        self.cases.push(GradCase {
            name: name.to_string(),
            max_rel_error: err,
        });
        Ok(())
    }
}

fn pyramid(levels: Vec<Tensor>) -> Result<FeaturePyramid> {
    FeaturePyramid::new(levels.into_iter().map(|t| FeatureMap::new(t, Role::Raw)).collect::<Result<_>>()?)
}

/// Runs every case and returns its worst relative error.
pub fn gradient_suite(seed: u64, epsilon: f64) -> Result<Vec<GradCase>> {
    let mut s = Suite {
        rng: RandomSource::new(seed),
        eps: epsilon,
        cases: Vec::new(),
    };

    let b = s.rand(&[3, 4]);
    let row = s.rand(&[4]);
    let den = s.positive(&[3, 4]);
    s.gen_check("add", Gen::Rand, &[3, 4], |x| x.add(&b))?;
    s.check("add_broadcast", row.clone(), |x| b.add(x))?;
    s.gen_check("sub", Gen::Rand, &[3, 4], |x| b.sub(x))?;
    s.gen_check("mul", Gen::Rand, &[3, 4], |x| x.mul(&b))?;
    s.gen_check("mul_self", Gen::Rand, &[3, 4], |x| x.mul(x))?;
    s.gen_check("div_numerator", Gen::Rand, &[3, 4], |x| x.div(&den))?;
    s.gen_check("div_denominator", Gen::Positive, &[3, 4], |x| b.div(x))?;
    s.gen_check("relu", Gen::OffZero, &[3, 4], |x| Ok(x.relu()))?;
    s.gen_check("sigmoid", Gen::Rand, &[3, 4], |x| Ok(x.sigmoid()))?;
    s.gen_check("abs", Gen::OffZero, &[3, 4], |x| Ok(x.abs()))?;
    s.gen_check("exp", Gen::Rand, &[3, 4], |x| Ok(x.exp()))?;
    s.gen_check("ln", Gen::Positive, &[3, 4], |x| Ok(x.ln()))?;
    s.gen_check("neg", Gen::Rand, &[3, 4], |x| Ok(x.neg()))?;
    s.gen_check("scale", Gen::Rand, &[3, 4], |x| Ok(x.scale(-2.5)))?;
    s.gen_check("add_scalar", Gen::Rand, &[3, 4], |x| Ok(x.add_scalar(0.7)))?;
    s.gen_check("clamp", Gen::OffZero, &[3, 4], |x| Ok(x.clamp(-0.5, 0.55)))?;
    s.gen_check("sum", Gen::Rand, &[3, 4], |x| Ok(x.sum().scale(3.0)))?;
    s.gen_check("mean", Gen::Rand, &[3, 4], |x| Ok(x.mean().mul(&x.mean())?))?;
    s.gen_check("sum_axis0", Gen::Rand, &[3, 4], |x| x.sum_axis(0))?;
    s.gen_check("sum_axis1", Gen::Rand, &[3, 4], |x| x.sum_axis(1))?;
    s.gen_check("norm_last", Gen::OffZero, &[3, 2], |x| Ok(x.norm_last()))?;
    s.gen_check("reshape", Gen::Rand, &[3, 4], |x| x.reshape(&[2, 6]))?;
    s.gen_check("transpose", Gen::Rand, &[3, 4], |x| x.t())?;
    let m = s.rand(&[4, 5]);
    let l = s.rand(&[2, 3]);
    s.gen_check("matmul_lhs", Gen::Rand, &[3, 4], |x| x.matmul(&m))?;
    s.gen_check("matmul_rhs", Gen::Rand, &[3, 4], |x| l.matmul(x))?;
    let img = s.rand(&[2, 6, 6]);
    let ker = s.rand(&[3, 2, 3, 3]);
    let dw = s.rand(&[2, 1, 3, 3]);
    s.gen_check("conv2d_input", Gen::Rand, &[2, 6, 6], |x| x.conv2d(&ker, 1, 1, 1))?;
    s.gen_check("conv2d_kernel", Gen::Rand, &[3, 2, 3, 3], |k| img.conv2d(k, 1, 1, 1))?;
    s.gen_check("conv2d_strided", Gen::Rand, &[2, 7, 7], |x| x.conv2d(&ker, 2, 0, 1))?;
    s.gen_check("conv2d_grouped", Gen::Rand, &[2, 6, 6], |x| x.conv2d(&dw, 1, 1, 2))?;
    s.gen_check("conv2d_grouped_kernel", Gen::Rand, &[2, 1, 3, 3], |k| img.conv2d(k, 1, 1, 2))?;
    s.gen_check("softmax_rows", Gen::Rand, &[3, 4], |x| x.softmax(1))?;
    s.gen_check("softmax_cols", Gen::Rand, &[3, 4], |x| x.softmax(0))?;
    s.gen_check("global_avg_pool", Gen::Rand, &[2, 3, 4], |x| x.global_avg_pool())?;
    s.gen_check("upsample_nearest", Gen::Rand, &[2, 2, 3], |x| x.upsample_nearest(4, 6))?;
    s.gen_check("max_pool2", Gen::Rand, &[2, 5, 4], |x| x.max_pool2())?;
    s.gen_check("narrow", Gen::Rand, &[5], |x| x.narrow(1, 3))?;
    let tail = s.rand(&[3]);
    s.gen_check("concat", Gen::Rand, &[4], |x| Tensor::concat(&[x.clone(), tail.clone(), x.scale(2.0)]))?;
    s.gen_check("gather", Gen::Rand, &[5], |x| x.gather(&[4, 0, 0, 2]))?;

    // Attention block: input and each weight in turn.
    let (d, d_a) = (4, 2);
    let x = s.rand(&[d, 3, 3]);
    let w_q = s.rand(&[d, d_a]);
    let w_k = s.rand(&[d, d_a]);
    let w_v = s.rand(&[d, d]);
    let gate = s.rand(&[d]);
    let caa = |q: &Tensor, k: &Tensor, v: &Tensor, g: &Tensor| CaaWeights::from_tensors(q.clone(), k.clone(), v.clone(), g.clone());
    s.check("caa_input", x.clone(), |t| caa_forward_with(t, &caa(&w_q, &w_k, &w_v, &gate)?, true))?;
    s.check("caa_w_q", w_q.clone(), |t| caa_forward_with(&x, &caa(t, &w_k, &w_v, &gate)?, true))?;
    s.check("caa_w_k", w_k.clone(), |t| caa_forward_with(&x, &caa(&w_q, t, &w_v, &gate)?, true))?;
    s.check("caa_w_v", w_v.clone(), |t| caa_forward_with(&x, &caa(&w_q, &w_k, t, &gate)?, true))?;
    s.check("caa_gate", gate.clone(), |t| caa_forward_with(&x, &caa(&w_q, &w_k, &w_v, t)?, true))?;
    s.check("caa_no_self_attention", x.clone(), |t| caa_forward_with(t, &caa(&w_q, &w_k, &w_v, &gate)?, false))?;

    // Receptive-field attention: input, branch scores and one kernel.
    let mut rfa = RfaConv::init(2, &[3, 5], &mut s.rng)?;
    rfa.score = s.rand(&[2]);
    let x = s.rand(&[2, 5, 5]);
    s.check("rfaconv_input", x.clone(), |t| Ok(rfaconv_forward(&FeatureMap::new(t.clone(), Role::Raw)?, &rfa)?.data))?;
    s.check("rfaconv_score", rfa.score.clone(), |t| {
        let mut r = rfa.clone();
        r.score = t.clone();
        Ok(rfaconv_forward(&FeatureMap::new(x.clone(), Role::Raw)?, &r)?.data)
    })?;
    s.check("rfaconv_kernel", rfa.branches[1].depthwise.clone(), |t| {
        let mut r = rfa.clone();
        r.branches[1].depthwise = t.clone();
        Ok(rfaconv_forward(&FeatureMap::new(x.clone(), Role::Raw)?, &r)?.data)
    })?;

    // Weighted bidirectional fusion over three levels.
    let net = BiFpn::init(2, 3, &mut s.rng)?;
    let levels = vec![s.rand(&[2, 4, 4]), s.rand(&[2, 2, 2]), s.rand(&[2, 1, 1])];
    let fused_sum = |p: &FeaturePyramid, n: &BiFpn| -> Result<Tensor> {
        let out = bifpn_fuse(p, n)?;
        let parts: Vec<Tensor> = out.levels().iter().map(|m| m.data.reshape(&[m.data.numel()])).collect::<Result<_>>()?;
        Tensor::concat(&parts)
    };
    s.check("bifpn_finest", levels[0].clone(), |t| {
        fused_sum(&pyramid(vec![t.clone(), levels[1].clone(), levels[2].clone()])?, &net)
    })?;
    s.check("bifpn_coarsest", levels[2].clone(), |t| {
        fused_sum(&pyramid(vec![levels[0].clone(), levels[1].clone(), t.clone()])?, &net)
    })?;
    for node in [0, net.node_count() - 2] {
        let raw = s.positive(net.weights.nodes[node].shape());
        s.check(&format!("bifpn_weights_node{node}"), raw, |t| {
            let mut n = net.clone();
            n.weights.nodes[node] = t.clone();
            fused_sum(&pyramid(levels.clone())?, &n)
        })?;
    }
    s.gen_check("fusion_normalization", Gen::OffZero, &[3], |t| normalize_fusion_weights(t, 1e-4))?;

    // Losses.
    let mask = vec![1.0, 0.0, 1.0, 1.0];
    let offsets = vec![[0.0, 1.0], [2.0, 2.0], [1.0, 0.0], [3.0, 1.0]];
    let targets = vec![[0.2, 1.9], [2.5, 2.5], [1.7, 0.1], [3.1, 1.6]];
    let labels = [1.0, 0.0, 1.0, 0.0];
    let conf0 = Tensor::from_vec(&[4], vec![0.3, 0.6, 0.8, 0.2])?;
    let pred0 = s.rand(&[4, 2]);
    let assign = |pred: &Tensor, conf: &Tensor| CellAssignment::new(mask.clone(), pred.clone(), offsets.clone(), targets.clone(), conf.clone());
    s.check("coordinate_loss", pred0.clone(), |t| coordinate_loss(&assign(t, &conf0)?))?;
    s.gen_check("confidence_loss", Gen::Rand, &[4], |t| confidence_loss(&assign(&pred0, &t.sigmoid())?))?;
    s.gen_check("bce", Gen::Rand, &[4], |t| crate::rfafpn::bce(&t.sigmoid(), &labels))?;
    let other = s.off_zero(&[2]);
    s.gen_check("sparsity_loss", Gen::OffZero, &[3], |t| {
        sparsity_loss(&BasisWeights {
            cells: vec![t.clone(), other.clone()],
        })
    })?;
    let lw = LossWeights {
        lambda_x: 0.7,
        lambda_c: 1.3,
        lambda_l1: 0.05,
    };
    s.check("composite_loss", pred0.clone(), |t| {
        let a = assign(t, &conf0)?;
        let l1 = sparsity_loss(&BasisWeights { cells: vec![t.clone()] })?;
        composite_loss(&coordinate_loss(&a)?, &confidence_loss(&a)?, &l1, &lw)
    })?;

    // Adversarial terms through the discriminator.
    let disc = Discriminator::init(2, 3, &mut s.rng);
    let real = s.rand(&[2, 6, 6]);
    s.gen_check("generator_loss", Gen::Rand, &[2, 6, 6], |t| generator_loss(&disc, t))?;
    s.check("discriminator_loss", disc.conv2.clone(), |t| {
        let mut d = disc.clone();
        d.conv2 = t.clone();
        discriminator_loss(&d, &real, &real.scale(0.5))
    })?;

    Ok(s.cases)
}
