use nalgebra::{Cholesky, Dyn};

use super::{BilevelOracle, Dims, OracleQuery, SmoothnessConstants};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{cholesky, sym_eigen_range, symmetric_spectral_norm, RandomStream};
use crate::{Matrix, Vector};

/// Quadratic-quadratic bilevel problem with closed-form solution.
///
/// ```text
/// g(x, y; z)  = y'Ay/2 - y'(Bx + b + z)
/// f(x, y; xi) = |y - y_c|^2/2 + lambda |x|^2/2 + xi'y
/// ```
///
/// `z` and `xi` are Gaussian with per-coordinate standard deviation
/// `noise_std`. The Hessian in `y` is `A`, the mixed derivative is `-B'`, and
/// `y*(x) = A^{-1}(Bx + b)`.
#[derive(Clone, Debug)]
pub struct QuadQuad {
    a: Matrix,
    a_chol: Cholesky<f64, Dyn>,
    b_mat: Matrix,
    offset: Vector,
    lambda: f64,
    target: Vector,
    noise_std: f64,
    radius: f64,
    flip_mixed: bool,
    smoothness: SmoothnessConstants,
}

/// Recipe for a randomly generated [`QuadQuad`] instance.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadQuadParams {
    pub dim_x: usize,
    pub dim_y: usize,
    /// Smallest eigenvalue of `A`.
    pub mu: f64,
    /// Largest eigenvalue of `A`.
    pub l1: f64,
    /// `B` is `coupling` times the (rectangular) identity.
    pub coupling: f64,
    pub lambda: f64,
    /// Standard deviation of the entries of `b`.
    pub offset_scale: f64,
    /// Standard deviation of the entries of `y_c`.
    pub target_scale: f64,
    pub noise_std: f64,
    pub radius: f64,
    pub seed: u64,
}

impl Default for QuadQuadParams {
    fn default() -> Self {
        Self {
            dim_x: 10,
            dim_y: 10,
            mu: 1.0,
            l1: 2.0,
            coupling: 1.0,
            lambda: 1.0,
            offset_scale: 1.0,
            target_scale: 1.0,
            noise_std: 0.1,
            radius: 10.0,
            seed: 0,
        }
    }
}

// stream tag for problem generation, kept clear of device indices
const GENERATOR_STREAM: u64 = 0x5155_4144_5155_4144;

impl QuadQuad {
    pub fn new(
        a: Matrix,
        b_mat: Matrix,
        offset: Vector,
        lambda: f64,
        target: Vector,
        noise_std: f64,
    ) -> Result<Self> {
        let dy = a.nrows();
        if dy == 0 || a.ncols() != dy {
            return Err(Error::invalid("A", "must be a non-empty square matrix"));
        }
        check_dim("B rows", dy, b_mat.nrows())?;
        if b_mat.ncols() == 0 {
            return Err(Error::invalid("B", "needs at least one column"));
        }
        check_dim("b", dy, offset.len())?;
        check_dim("y_c", dy, target.len())?;
        if (&a - a.transpose()).amax() > 1e-12 * (1.0 + a.amax()) {
            return Err(Error::invalid("A", "must be symmetric"));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::invalid("noise_std", "must be finite and non-negative"));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda", "must be finite and non-negative"));
        }
        let a_chol = cholesky(a.clone(), "A")?;
        let mut problem = Self {
            a,
            a_chol,
            b_mat,
            offset,
            lambda,
            target,
            noise_std,
            radius: 10.0,
            flip_mixed: false,
            smoothness: SmoothnessConstants {
                mu: 1.0,
                l0: 1.0,
                l1: 1.0,
                l21: 0.0,
                l22: 0.0,
                sigma: 0.0,
            },
        };
        problem.smoothness = problem.compute_smoothness();
        Ok(problem)
    }

    /// Random instance: `A = U diag(s) U'` with `U` a random orthogonal matrix
    /// and the spectrum `s` spanning `[mu, l1]` (both endpoints included when
    /// `dim_y >= 2`).
    pub fn generate(p: &QuadQuadParams) -> Result<Self> {
        if p.dim_x == 0 || p.dim_y == 0 {
            return Err(Error::invalid("dims", "dimensions must be positive"));
        }
        if !(p.mu > 0.0) || !(p.l1 >= p.mu) || !p.l1.is_finite() {
            return Err(Error::invalid("mu/l1", "need 0 < mu <= l1"));
        }
        if !(p.radius > 0.0) {
            return Err(Error::invalid("radius", "must be positive"));
        }
        let mut rng = RandomStream::new(p.seed, GENERATOR_STREAM);
        let dy = p.dim_y;
        let spectrum = Vector::from_fn(dy, |i, _| match i {
            0 => p.mu,
            i if i + 1 == dy => p.l1,
            _ => p.mu + (p.l1 - p.mu) * rng.next_uniform(),
        });
        let gauss = Matrix::from_iterator(dy, dy, rng.gaussian_vec(dy * dy, 1.0).iter().copied());
        let u = gauss.qr().q();
        let a = &u * Matrix::from_diagonal(&spectrum) * u.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let b_mat = Matrix::from_fn(dy, p.dim_x, |i, j| if i == j { p.coupling } else { 0.0 });
        let offset = rng.gaussian_vec(dy, p.offset_scale);
        let target = rng.gaussian_vec(dy, p.target_scale);
        Ok(Self::new(a, b_mat, offset, p.lambda, target, p.noise_std)?.with_radius(p.radius))
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self.smoothness = self.compute_smoothness();
        self
    }

    pub fn with_noise_std(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self.smoothness = self.compute_smoothness();
        self
    }

    /// Test-only fault: negates the mixed second derivative everywhere it is
    /// used (stochastic oracle and exact hypergradient alike).
    pub fn with_flipped_mixed_term(mut self) -> Self {
        self.flip_mixed = true;
        self
    }

    pub fn hessian(&self) -> &Matrix {
        &self.a
    }

    pub fn coupling_matrix(&self) -> &Matrix {
        &self.b_mat
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Unique minimizer of `Phi`.
    pub fn upper_minimizer(&self) -> Vector {
        let ainv_b = self.a_chol.solve(&self.b_mat);
        let lhs = ainv_b.transpose() * &ainv_b + Matrix::identity(self.dims().x, self.dims().x) * self.lambda;
        let rhs = -(ainv_b.transpose() * (self.a_chol.solve(&self.offset) - &self.target));
        match cholesky(lhs.clone(), "upper Hessian") {
            Ok(c) => c.solve(&rhs),
            Err(_) => lhs.lu().solve(&rhs).unwrap_or_else(|| Vector::zeros(self.dims().x)),
        }
    }

    fn mixed(&self, v: &Vector) -> Vector {
        let out = self.b_mat.tr_mul(v);
        if self.flip_mixed {
            out
        } else {
            -out
        }
    }

    fn compute_smoothness(&self) -> SmoothnessConstants {
        let dy = self.dims().y;
        let dx = self.dims().x;
        let (mu, a_max) = sym_eigen_range(&self.a);
        // joint Hessian of g in (x, y): [[0, -B'], [-B, A]]
        let mut joint = Matrix::zeros(dx + dy, dx + dy);
        joint.view_mut((dx, dx), (dy, dy)).copy_from(&self.a);
        joint.view_mut((dx, 0), (dy, dx)).copy_from(&(-&self.b_mat));
        joint.view_mut((0, dx), (dx, dy)).copy_from(&(-self.b_mat.transpose()));
        let g_smooth = symmetric_spectral_norm(&joint);
        let f_smooth = self.lambda.max(1.0);
        let r = self.radius;
        SmoothnessConstants {
            mu,
            l0: libm::hypot(self.lambda * r, r + self.target.norm()),
            l1: a_max.max(g_smooth).max(f_smooth),
            l21: 0.0,
            l22: 0.0,
            sigma: self.noise_std * libm::sqrt(dy as f64),
        }
    }
}

impl BilevelOracle for QuadQuad {
    fn dims(&self) -> Dims {
        Dims {
            x: self.b_mat.ncols(),
            y: self.a.nrows(),
        }
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn sample_width(&self) -> u64 {
        self.dims().y as u64
    }

    fn smoothness(&self) -> SmoothnessConstants {
        self.smoothness
    }

    fn region_radius(&self) -> f64 {
        self.radius
    }

    fn grad_x_f(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        q.validate(self.dims())?;
        Ok(q.x * self.lambda)
    }

    fn grad_y_f(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        q.validate(self.dims())?;
        let xi = q.sample.clone().gaussian_vec(self.dims().y, self.noise_std);
        Ok(q.y - &self.target + xi)
    }

    fn grad_y_g(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        q.validate(self.dims())?;
        let zeta = q.sample.clone().gaussian_vec(self.dims().y, self.noise_std);
        Ok(&self.a * q.y - &self.b_mat * q.x - &self.offset - zeta)
    }

    fn hvp_yy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector> {
        q.validate(self.dims())?;
        check_dim("hvp vector", self.dims().y, v.len())?;
        Ok(&self.a * v)
    }

    fn jvp_xy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector> {
        q.validate(self.dims())?;
        check_dim("jvp vector", self.dims().y, v.len())?;
        Ok(self.mixed(v))
    }

    fn upper_objective(&self, x: &Vector, y: &Vector) -> Result<f64> {
        check_dim("x", self.dims().x, x.len())?;
        check_dim("y", self.dims().y, y.len())?;
        Ok(0.5 * (y - &self.target).norm_squared() + 0.5 * self.lambda * x.norm_squared())
    }

    fn has_exact_lower_solution(&self) -> bool {
        true
    }

    fn has_exact_hypergradient(&self) -> bool {
        true
    }

    fn exact_lower_solution(&self, x: &Vector) -> Result<Vector> {
        check_dim("x", self.dims().x, x.len())?;
        Ok(self.a_chol.solve(&(&self.b_mat * x + &self.offset)))
    }

    fn exact_hypergradient(&self, x: &Vector) -> Result<Vector> {
        let y = self.exact_lower_solution(x)?;
        let w = self.a_chol.solve(&(y - &self.target));
        Ok(x * self.lambda - self.mixed(&w))
    }
}
