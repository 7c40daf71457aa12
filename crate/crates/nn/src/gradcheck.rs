//! Central-difference gradient oracle. Only evaluates the forward function,
//! so it stays independent of any backward implementation it is used to check.

use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
/// Denominator floor for relative error. Below it the check degrades to an
/// absolute one, since central differences carry ~1e-10 roundoff per unit of
/// loss and cannot resolve the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-3;

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every element of every input.
pub fn numeric_grads<F>(inputs: &[Tensor<f64>], eps: f64, mut f: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..work.len() {
        let mut g = vec![0.0; work[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - eps;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest element-wise relative error over all tensors.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.len(), n.len());
            a.iter().zip(n).map(|(&x, &y)| relative_error(x, y))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_central_difference() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let g = numeric_grads(&[x], 1e-4, |t| t[0].data().iter().map(|v| v * v).sum());
        for (gi, xi) in g[0].iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }
}
