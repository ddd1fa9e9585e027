//! Feature-map discriminator and the adversarial coupling of encoder and
//! decoder outputs.

use super::bifpn::{bifpn_fuse, finest_as_f1, BiFpn};
use super::feature::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Logits are clamped to this magnitude so probabilities never saturate.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Two 3×3 convolutions (each followed by ReLU and 2×2 max pooling), global
/// average pooling, an affine map and a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub conv1: Tensor,
    pub conv2: Tensor,
    pub affine_w: Tensor,
    pub affine_b: Tensor,
}

impl Discriminator {
    pub fn init(channels: usize, hidden: usize, rng: &mut RandomSource) -> Self {
        Self {
            conv1: Tensor::kaiming(&[hidden, channels, 3, 3], channels * 9, rng),
            conv2: Tensor::kaiming(&[hidden, hidden, 3, 3], hidden * 9, rng),
            affine_w: Tensor::kaiming(&[hidden], hidden, rng),
            affine_b: Tensor::param(&[1], vec![0.0]).expect("scalar"),
        }
    }

    /// All parameters set to zero; scores every input at exactly 0.5.
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let z = |s: &[usize]| Tensor::param(s, vec![0.0; s.iter().product()]).expect("shape");
        Self {
            conv1: z(&[hidden, channels, 3, 3]),
            conv2: z(&[hidden, hidden, 3, 3]),
            affine_w: z(&[hidden]),
            affine_b: z(&[1]),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("affine_w", &self.affine_w),
            ("affine_b", &self.affine_b),
        ]
    }

    /// Clamped logit, shape `[1]`.
    pub fn logit(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.shape()[0] != self.conv1.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                lhs: x.shape().to_vec(),
                rhs: self.conv1.shape().to_vec(),
            });
        }
        let h = x.conv2d(&self.conv1, 1, 1, 1)?.relu().max_pool2()?;
        let h = h.conv2d(&self.conv2, 1, 1, 1)?.relu().max_pool2()?;
        let z = h.global_avg_pool()?.mul(&self.affine_w)?.sum().add(&self.affine_b)?;
        Ok(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    }

    /// `ln p(real)` as a differentiable scalar.
    pub fn log_prob_real(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logit(x)?.sigmoid().ln())
    }

    /// `ln (1 − p(real))`.
    pub fn log_prob_fake(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logit(x)?.neg().sigmoid().ln())
    }
}

/// Probability in `(0, 1)` that `x` comes from the reference path.
pub fn discriminator_forward(d: &Discriminator, x: &FeatureMap) -> Result<f64> {
    Ok(d.logit(&x.data)?.sigmoid().item())
}

/// Discriminator loss `−[ln p(real) + ln(1 − p(fake))]`. Both inputs are
/// detached, so only discriminator parameters receive gradients.
pub fn discriminator_loss(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let lr = d.log_prob_real(&real.detach())?;
    let lf = d.log_prob_fake(&fake.detach())?;
    Ok(lr.add(&lf)?.neg())
}

/// Non-saturating generator loss `−ln p(fake)`.
pub fn generator_loss(d: &Discriminator, fake: &Tensor) -> Result<Tensor> {
    Ok(d.log_prob_real(fake)?.neg())
}

#[derive(Clone, Debug)]
pub struct AdversarialOutput {
    pub f1: FeatureMap,
    pub g_loss: Tensor,
    pub d_loss: Tensor,
}

/// Decodes the encoder pyramid (identity when `decoder` is `None`), takes the
/// finest level as `F1_GAN`, and scores it against the reference features.
pub fn adversarial_step(
    encoded: &FeaturePyramid,
    reference: &FeatureMap,
    decoder: Option<&BiFpn>,
    disc: &Discriminator,
) -> Result<AdversarialOutput> {
    let decoded = match decoder {
        Some(net) => bifpn_fuse(encoded, net)?,
        None => encoded.clone(),
    };
    let f1 = finest_as_f1(&decoded);
    if f1.data.shape() != reference.data.shape() {
        return Err(Error::ShapeMismatch {
            op: "adversarial_step",
            lhs: f1.data.shape().to_vec(),
            rhs: reference.data.shape().to_vec(),
        });
    }
    let g_loss = generator_loss(disc, &f1.data)?;
    let d_loss = discriminator_loss(disc, &reference.data, &f1.data)?;
    Ok(AdversarialOutput { f1, g_loss, d_loss })
}
