//! Receptive-field attention fusion: the encoder (RFAconv), the decoder
//! (bidirectional weighted fusion), the adversarial discriminator coupling
//! them, the training losses and the final `F3` combination.

pub mod bifpn;
pub mod discriminator;
pub mod feature;
pub mod loss;
pub mod rfaconv;

pub use bifpn::{bifpn_fuse, normalize_fusion_weights, BiFpn, FusionWeights, FUSION_EPSILON};
pub use discriminator::{
    adversarial_step, discriminator_forward, discriminator_loss, generator_loss, AdversarialOutput,
    Discriminator,
};
pub use feature::{FeatureMap, FeaturePyramid, Role};
pub use loss::{
    bce, composite_loss, confidence_loss, coordinate_loss, sparsity_loss, BasisWeights,
    CellAssignment, LossWeights,
};
pub use rfaconv::{rfaconv_forward, RfaBranch, RfaConv, DEFAULT_KERNELS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `F3 = F1 + F2`. When channel counts differ, `align` (a `C1×C2×1×1`
/// kernel) first projects `f2` onto `f1`'s channels.
pub fn fuse_f3(f1: &FeatureMap, f2: &FeatureMap, align: Option<&Tensor>) -> Result<FeatureMap> {
    let f2d = match align {
        Some(k) if f1.channels() != f2.channels() => f2.data.conv2d(k, 1, 0, 1)?,
        _ => f2.data.clone(),
    };
    if f2d.shape() != f1.data.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse_f3",
            lhs: f1.data.shape().to_vec(),
            rhs: f2d.shape().to_vec(),
        });
    }
    FeatureMap::new(f1.data.add(&f2d)?, Role::F3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn fm(c: usize, seed: u64, role: Role) -> FeatureMap {
        FeatureMap::new(Tensor::uniform(&[c, 3, 4], -1.0, 1.0, &mut RandomSource::new(seed)), role).unwrap()
    }

    #[test]
    fn f3_examples() {
        let f1 = fm(2, 1, Role::F1Gan);
        let zero = FeatureMap::new(Tensor::zeros(&[2, 3, 4]), Role::F2Caa).unwrap();
        assert_eq!(fuse_f3(&f1, &zero, None).unwrap().data.to_vec(), f1.data.to_vec());
        let twice = fuse_f3(&f1, &f1, None).unwrap().data.to_vec();
        assert!(twice.iter().zip(f1.data.to_vec()).all(|(a, b)| *a == 2.0 * b));
        let f2 = fm(2, 2, Role::F2Caa);
        let sum = fuse_f3(&f1, &f2, None).unwrap();
        assert_eq!(sum.role, Role::F3);
        let want: Vec<f64> = f1.data.to_vec().iter().zip(f2.data.to_vec()).map(|(a, b)| a + b).collect();
        assert_eq!(sum.data.to_vec(), want);
    }

    #[test]
    fn channel_alignment() {
        let f1 = fm(2, 3, Role::F1Gan);
        let f2 = fm(3, 4, Role::F2Caa);
        assert!(fuse_f3(&f1, &f2, None).is_err());
        let k = Tensor::from_vec(&[2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = fuse_f3(&f1, &f2, Some(&k)).unwrap();
        assert_eq!(out.data.shape(), &[2, 3, 4]);
        let spatial = FeatureMap::new(Tensor::zeros(&[2, 2, 2]), Role::F2Caa).unwrap();
        assert!(fuse_f3(&f1, &spatial, None).is_err());
    }
}
