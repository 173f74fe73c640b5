use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central finite differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`
/// for every element of `x`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let step = T::lit(eps);
    let two_eps = T::lit(2.0 * eps);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: format!("finite difference probe at element {i}") });
        }
        grad.push((plus - minus) / two_eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        let g = finite_difference_gradient(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_one() {
        let x = Tensor::<f64>::scalar(1.0);
        let g = finite_difference_gradient(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::<f64>::scalar(0.0);
        assert!(finite_difference_gradient(|t| Ok(t.item()), &x, 0.0).is_err());
        assert!(finite_difference_gradient(|t| Ok(1.0 / t.item().abs().min(1e-300) * f64::INFINITY), &x, 1e-5).is_err());
    }
}
