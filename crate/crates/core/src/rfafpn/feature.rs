use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a feature map sits in the fusion dataflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Raw,
    Rfa,
    F1Gan,
    F2Caa,
    F3,
}

/// A `C×H×W` activation grid tagged with its role.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    pub role: Role,
}

impl FeatureMap {
    pub fn new(data: Tensor, role: Role) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::invalid(
                "feature_map",
                format!("expected C×H×W data, got {:?}", data.shape()),
            ));
        }
        Ok(Self { data, role })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn with_role(&self, role: Role) -> Self {
        Self {
            data: self.data.clone(),
            role,
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
            role: self.role,
        }
    }
}

/// Multi-scale feature maps, finest first. Each coarser level has spatial
/// extent `ceil(previous / 2)` and all levels share one channel count.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub const SCALE_RATIO: usize = 2;

    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("feature_pyramid", "at least one level is required"))?;
        let c = first.channels();
        for pair in levels.windows(2) {
            let (fine, coarse) = (&pair[0], &pair[1]);
            let expect = (fine.height().div_ceil(2), fine.width().div_ceil(2));
            if coarse.channels() != c || (coarse.height(), coarse.width()) != expect {
                return Err(Error::ShapeMismatch {
                    op: "feature_pyramid",
                    lhs: fine.data.shape().to_vec(),
                    rhs: coarse.data.shape().to_vec(),
                });
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &FeatureMap {
        &self.levels[0]
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.data.shape().to_vec()).collect()
    }

    pub fn map(&self, f: impl Fn(&FeatureMap) -> Result<FeatureMap>) -> Result<Self> {
        Self::new(self.levels.iter().map(f).collect::<Result<_>>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Tensor::zeros(&[c, h, w]), Role::Raw).unwrap()
    }

    #[test]
    fn pyramid_shape_rules() {
        assert!(FeaturePyramid::new(vec![fm(4, 16, 16), fm(4, 8, 8), fm(4, 4, 4)]).is_ok());
        assert!(FeaturePyramid::new(vec![fm(4, 5, 7), fm(4, 3, 4)]).is_ok());
        assert!(FeaturePyramid::new(vec![fm(4, 16, 16), fm(2, 8, 8)]).is_err());
        assert!(FeaturePyramid::new(vec![fm(4, 16, 16), fm(4, 4, 4)]).is_err());
        assert!(FeaturePyramid::new(vec![]).is_err());
        assert!(FeatureMap::new(Tensor::zeros(&[4, 4]), Role::Raw).is_err());
    }
}
