use crate::error::{Error, Result};
use crate::Vector;

use super::max_abs;

/// Default central-difference step, scaled to the point: `1e-5 (1 + |p|_inf)`.
pub fn default_step(point: &Vector) -> f64 {
    1e-5 * (1.0 + max_abs(point))
}

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, point: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("h", "finite-difference step must be positive"));
    }
    let mut probe = point.clone();
    let mut grad = Vector::zeros(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn half_squared_norm() {
        let g = finite_diff_grad(|v| v.norm_squared() / 2.0, &Vector::from_vec(alloc::vec![1.0, 2.0]), 1e-5)
            .unwrap();
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Vector::from_vec(alloc::vec![3.0, -1.0, 0.5]);
        let g = finite_diff_grad(|_| 4.2, &p, default_step(&p)).unwrap();
        assert_eq!(g, Vector::zeros(3));
    }

    #[test]
    fn cubic() {
        let g = finite_diff_grad(|v| v[0] * v[0] * v[0], &Vector::from_vec(alloc::vec![2.0]), 1e-4).unwrap();
        assert_abs_diff_eq!(g[0], 12.0, epsilon = 1e-6);
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Vector::zeros(2);
        assert!(finite_diff_grad(|v| v.sum(), &p, 0.0).is_err());
        assert!(finite_diff_grad(|v| v.sum(), &p, -1.0).is_err());
    }

    #[test]
    fn quadratic_within_rounding() {
        // f(v) = v^T M v / 2 + c^T v, gradient M v + c.
        let m = crate::Matrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]);
        let c = Vector::from_vec(alloc::vec![1.0, -2.0, 0.25]);
        let p = Vector::from_vec(alloc::vec![0.7, -1.1, 2.0]);
        let f = |v: &Vector| v.dot(&(&m * v)) / 2.0 + c.dot(v);
        let g = finite_diff_grad(f, &p, default_step(&p)).unwrap();
        let exact = &m * &p + &c;
        let scale = 1.0 + f(&p).abs();
        // rounding error of a difference quotient is ~eps * |f| / h
        let tol = 100.0 * f64::EPSILON * scale / default_step(&p);
        assert!((g - exact).amax() <= tol);
    }
}
