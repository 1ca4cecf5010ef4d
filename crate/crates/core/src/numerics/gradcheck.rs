//! Central finite-difference check of reverse-mode gradients.

use super::tensor::{no_grad, Scalar, Tensor};
use crate::error::Result;

/// Per-coordinate comparison between autodiff and central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Scalar>,
    pub numeric: Vec<Scalar>,
    pub max_rel_error: Scalar,
}

/// |a - c| / max(|a|, |c|, 1e-8); non-finite inputs map to +inf.
pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    if !analytic.is_finite() || !numeric.is_finite() {
        return Scalar::INFINITY;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradient of scalar-valued `f` at `x` against
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
pub fn grad_check_report<F>(f: F, x: &Tensor, eps: Scalar) -> GradCheckReport
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n = x.numel();
    let leaf = x.detach().into_parameter();
    let analytic = match f(&leaf).and_then(|loss| loss.gradients().map(|g| g.get_or_zeros(&leaf)))
    {
        Ok(g) => g,
        Err(_) => vec![Scalar::NAN; n],
    };

    let eval = |data: Vec<Scalar>| -> Scalar {
        no_grad(|| {
            Tensor::new(data, x.shape())
                .and_then(|t| f(&t))
                .and_then(|loss| loss.item())
                .unwrap_or(Scalar::NAN)
        })
    };

    let base = x.to_vec();
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        numeric.push((eval(plus) - eval(minus)) / (2.0 * eps));
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &c)| relative_error(a, c))
        .fold(0.0, Scalar::max);
    GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
    }
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, x: &Tensor, eps: Scalar) -> Scalar
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_report(f, x, eps).max_rel_error
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = RngState::new(3);
        let x = Tensor::new(rng.normals(12), &[3, 4]).unwrap();
        let err = grad_check(|t| t.squared_norm(), &x, 1e-3);
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let err = grad_check(|_| Ok(Tensor::scalar(5.0)), &x, 1e-3);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn failures_report_infinity() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let err = grad_check(|t| t.reshape(&[3]).and_then(|t| t.sum()), &x, 1e-3);
        assert!(err.is_infinite());
    }
}
