use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("grad_check", "epsilon must be positive"));
    }
    let base = x.to_vec();
    let shape = x.shape().to_vec();
    let leaf = Tensor::param(&shape, base.clone())?;
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::NonScalar(y.shape().to_vec()));
    }
    if !y.item().is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {}", y.item())));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(&shape, v)?;
        let out = no_grad(|| f(&t))?.item();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite(format!("f(x ± ε) = {out}")))
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += epsilon;
        let mut minus = base.clone();
        minus[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exactish() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.7, 0.1, 0.9]).unwrap();
        let err = grad_check(|x| Ok(x.mul(x)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let x = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let err = grad_check(|x| Ok(x.scale(0.0).sum().add_scalar(3.0)), &x, 1e-5).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let x = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
        assert!(grad_check(|x| Ok(x.ln().sum()), &x, 1e-5).is_err());
        assert!(grad_check(|x| Ok(x.sum()), &x, 0.0).is_err());
    }
}
