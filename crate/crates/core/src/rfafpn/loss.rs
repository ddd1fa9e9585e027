//! Coordinate, confidence and sparsity losses and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grid-cell realisation of the per-element assignment: element `m` has
/// mask `y_m`, predicted cell-relative coordinate `K_m`, cell offset `O_m`,
/// absolute target `K*_m` and confidence `c_m`.
#[derive(Clone, Debug)]
pub struct CellAssignment {
    pub mask: Vec<f64>,
    /// `M×2`
    pub predicted: Tensor,
    pub offsets: Vec<[f64; 2]>,
    pub targets: Vec<[f64; 2]>,
    /// `[M]`, values in `[0, 1]`.
    pub confidence: Tensor,
}

impl CellAssignment {
    pub fn new(
        mask: Vec<f64>,
        predicted: Tensor,
        offsets: Vec<[f64; 2]>,
        targets: Vec<[f64; 2]>,
        confidence: Tensor,
    ) -> Result<Self> {
        let m = mask.len();
        if m == 0 {
            return Err(Error::invalid("cell_assignment", "no elements"));
        }
        if predicted.shape() != [m, 2] || confidence.shape() != [m] || offsets.len() != m || targets.len() != m {
            return Err(Error::invalid(
                "cell_assignment",
                format!(
                    "inconsistent sizes: mask {m}, predicted {:?}, confidence {:?}, offsets {}, targets {}",
                    predicted.shape(),
                    confidence.shape(),
                    offsets.len(),
                    targets.len()
                ),
            ));
        }
        if mask.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("cell_assignment", "mask must be binary"));
        }
        if confidence.data().iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("cell_assignment", "confidence outside [0, 1]"));
        }
        Ok(Self {
            mask,
            predicted,
            offsets,
            targets,
            confidence,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// `Σ_m y_m · ‖(K_m + O_m) − K*_m‖₂`.
pub fn coordinate_loss(a: &CellAssignment) -> Result<Tensor> {
    let m = a.len();
    let shift: Vec<f64> = a
        .offsets
        .iter()
        .zip(&a.targets)
        .flat_map(|(o, t)| [o[0] - t[0], o[1] - t[1]])
        .collect();
    let shift = Tensor::from_vec(&[m, 2], shift)?;
    let mask = Tensor::from_vec(&[m], a.mask.clone())?;
    Ok(a.predicted.add(&shift)?.norm_last().mul(&mask)?.sum())
}

pub const CONFIDENCE_CLAMP: f64 = 1e-7;

/// Element-mean binary cross entropy between `c_m` (clamped to
/// `[1e-7, 1 − 1e-7]`) and `y_m`.
pub fn confidence_loss(a: &CellAssignment) -> Result<Tensor> {
    bce(&a.confidence, &a.mask)
}

/// Mean binary cross entropy of probabilities against 0/1 targets.
pub fn bce(prob: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let n = prob.numel();
    if targets.len() != n {
        return Err(Error::invalid("bce", format!("{n} probabilities, {} targets", targets.len())));
    }
    let c = prob.clamp(CONFIDENCE_CLAMP, 1.0 - CONFIDENCE_CLAMP);
    let y = Tensor::from_vec(prob.shape(), targets.to_vec())?;
    let not_y = Tensor::from_vec(prob.shape(), targets.iter().map(|t| 1.0 - t).collect())?;
    let pos = y.mul(&c.ln())?;
    let neg = not_y.mul(&c.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// Coefficient sets `w_v^t`, one tensor per cell `v`.
#[derive(Clone, Debug)]
pub struct BasisWeights {
    pub cells: Vec<Tensor>,
}

/// `Σ_v Σ_t |w_v^t|`.
pub fn sparsity_loss(b: &BasisWeights) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for w in &b.cells {
        let s = w.abs().sum();
        acc = Some(match acc {
            Some(a) => a.add(&s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::invalid("sparsity_loss", "basis is empty"))
}

/// Loss weights; all default to one.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_x: f64,
    pub lambda_c: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            lambda_c: 1.0,
            lambda_l1: 1.0,
        }
    }
}

/// `λ_x·L_x + λ_c·L_c + λ_L1·L_L1`.
pub fn composite_loss(lx: &Tensor, lc: &Tensor, ll1: &Tensor, lw: &LossWeights) -> Result<Tensor> {
    for (name, v) in [("lambda_x", lw.lambda_x), ("lambda_c", lw.lambda_c), ("lambda_l1", lw.lambda_l1)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid("composite_loss", format!("{name} = {v} must be a non-negative number")));
        }
    }
    lx.scale(lw.lambda_x)
        .add(&lc.scale(lw.lambda_c))?
        .add(&ll1.scale(lw.lambda_l1))
}
