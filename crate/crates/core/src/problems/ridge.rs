use super::{BilevelOracle, Dims, OracleQuery, SmoothnessConstants};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{cholesky, RandomStream};
use crate::{Matrix, Vector};

/// Train/validation split for [`RidgeHyper`]. Rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeData {
    pub train_features: Matrix,
    pub train_targets: Vector,
    pub val_features: Matrix,
    pub val_targets: Vector,
}

const SYNTH_STREAM: u64 = 0x5249_4447_4544_4154;

impl RidgeData {
    pub fn new(
        train_features: Matrix,
        train_targets: Vector,
        val_features: Matrix,
        val_targets: Vector,
    ) -> Result<Self> {
        if train_features.nrows() == 0 || val_features.nrows() == 0 {
            return Err(Error::invalid("data", "train and validation splits must be non-empty"));
        }
        if train_features.ncols() == 0 {
            return Err(Error::invalid("data", "need at least one feature"));
        }
        check_dim("validation features", train_features.ncols(), val_features.ncols())?;
        check_dim("train targets", train_features.nrows(), train_targets.len())?;
        check_dim("validation targets", val_features.nrows(), val_targets.len())?;
        let finite = train_features.iter().chain(val_features.iter()).all(|v| v.is_finite())
            && train_targets.iter().chain(val_targets.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("data", "all entries must be finite"));
        }
        Ok(Self {
            train_features,
            train_targets,
            val_features,
            val_targets,
        })
    }

    /// Linear model `t = a'w + noise` with standard normal features and
    /// weights.
    pub fn synthesize(n_train: usize, n_val: usize, dim: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = RandomStream::new(seed, SYNTH_STREAM);
        let w = rng.gaussian_vec(dim, 1.0);
        let mut split = |n: usize| {
            let feats = Matrix::from_iterator(n, dim, rng.gaussian_vec(n * dim, 1.0).iter().copied());
            let targets = &feats * &w + rng.gaussian_vec(n, noise);
            (feats, targets)
        };
        let (tx, ty) = split(n_train);
        let (vx, vy) = split(n_val);
        Self::new(tx, ty, vx, vy)
    }

    pub fn dim(&self) -> usize {
        self.train_features.ncols()
    }
}

/// Ridge regression with per-feature regularization weights `exp(x_i)`,
/// tuned on validation error.
///
/// ```text
/// g(x, y; j) = (a_j'y - t_j)^2/2 + sum_i exp(x_i) y_i^2/2   (train row j)
/// f(x, y; i) = (a_i'y - t_i)^2/2                             (validation row i)
/// ```
///
/// Samples pick one row uniformly. Smoothness constants are declared over
/// `|x|_inf <= log_reg_bound` and `|y| <= radius`.
#[derive(Clone, Debug)]
pub struct RidgeHyper {
    data: RidgeData,
    log_reg_bound: f64,
    radius: f64,
    flip_mixed: bool,
    smoothness: SmoothnessConstants,
}

impl RidgeHyper {
    pub fn new(data: RidgeData, log_reg_bound: f64, radius: f64) -> Result<Self> {
        if !(log_reg_bound >= 0.0) || !log_reg_bound.is_finite() {
            return Err(Error::invalid("log_reg_bound", "must be finite and non-negative"));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid("radius", "must be positive"));
        }
        let smoothness = declared_smoothness(&data, log_reg_bound, radius);
        Ok(Self {
            data,
            log_reg_bound,
            radius,
            flip_mixed: false,
            smoothness,
        })
    }

    /// Test-only fault: negates the mixed second derivative.
    pub fn with_flipped_mixed_term(mut self) -> Self {
        self.flip_mixed = true;
        self
    }

    pub fn data(&self) -> &RidgeData {
        &self.data
    }

    pub fn log_reg_bound(&self) -> f64 {
        self.log_reg_bound
    }

    fn check(&self, x: &Vector, y: &Vector) -> Result<()> {
        check_dim("x", self.data.dim(), x.len())?;
        check_dim("y", self.data.dim(), y.len())
    }

    fn residual_grad(features: &Matrix, targets: &Vector, row: usize, y: &Vector) -> Vector {
        let a = features.row(row).transpose();
        let r = a.dot(y) - targets[row];
        a * r
    }

    fn mixed(&self, x: &Vector, y: &Vector, v: &Vector) -> Vector {
        let out = Vector::from_fn(x.len(), |i, _| libm::exp(x[i]) * y[i] * v[i]);
        if self.flip_mixed {
            -out
        } else {
            out
        }
    }

    /// Full-batch `grad_y g(x, y)`.
    pub fn full_grad_y_g(&self, x: &Vector, y: &Vector) -> Result<Vector> {
        self.check(x, y)?;
        let feats = &self.data.train_features;
        let n = feats.nrows() as f64;
        let resid = feats * y - &self.data.train_targets;
        Ok(feats.tr_mul(&resid) / n + x.map(libm::exp).component_mul(y))
    }

    /// Full-batch `grad_y f(x, y)`.
    pub fn full_grad_y_f(&self, x: &Vector, y: &Vector) -> Result<Vector> {
        self.check(x, y)?;
        let feats = &self.data.val_features;
        let n = feats.nrows() as f64;
        let resid = feats * y - &self.data.val_targets;
        Ok(feats.tr_mul(&resid) / n)
    }

    fn lower_hessian(&self, x: &Vector) -> Matrix {
        let feats = &self.data.train_features;
        let n = feats.nrows() as f64;
        feats.tr_mul(feats) / n + Matrix::from_diagonal(&x.map(libm::exp))
    }
}

fn declared_smoothness(data: &RidgeData, bound: f64, radius: f64) -> SmoothnessConstants {
    let row_norms = |m: &Matrix| (0..m.nrows()).map(|i| m.row(i).norm()).collect::<alloc::vec::Vec<_>>();
    let train_norms = row_norms(&data.train_features);
    let val_norms = row_norms(&data.val_features);
    let max_of = |xs: &[f64]| xs.iter().copied().fold(0.0, f64::max);
    let reg_hi = libm::exp(bound);
    let reg_lo = libm::exp(-bound);

    let l0 = val_norms
        .iter()
        .zip(data.val_targets.iter())
        .map(|(a, t)| a * (a * radius + t.abs()))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let train_max = max_of(&train_norms);
    // yy block a a' + diag(e^x); mixed block diag(e^x y); xx block diag(e^x y^2 / 2)
    let g_smooth = train_max * train_max + reg_hi + reg_hi * radius + 0.5 * reg_hi * radius * radius;
    let val_max = max_of(&val_norms);
    let f_smooth = val_max * val_max;
    let sigma = train_norms
        .iter()
        .zip(data.train_targets.iter())
        .map(|(a, t)| a * (a * radius + t.abs()))
        .fold(0.0, f64::max);
    SmoothnessConstants {
        mu: reg_lo,
        l0,
        l1: g_smooth.max(f_smooth).max(reg_lo),
        l21: reg_hi * (1.0 + radius),
        l22: reg_hi,
        sigma,
    }
}

impl BilevelOracle for RidgeHyper {
    fn dims(&self) -> Dims {
        Dims {
            x: self.data.dim(),
            y: self.data.dim(),
        }
    }

    fn noise_std(&self) -> f64 {
        self.smoothness.sigma
    }

    fn sample_width(&self) -> u64 {
        1
    }

    fn smoothness(&self) -> SmoothnessConstants {
        self.smoothness
    }

    fn region_radius(&self) -> f64 {
        self.radius
    }

    fn grad_x_f(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        q.validate(self.dims())?;
        Ok(Vector::zeros(self.data.dim()))
    }

    fn grad_y_f(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        q.validate(self.dims())?;
        let row = q.sample.clone().next_index(self.data.val_features.nrows());
        Ok(Self::residual_grad(&self.data.val_features, &self.data.val_targets, row, q.y))
    }

    fn grad_y_g(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        q.validate(self.dims())?;
        let row = q.sample.clone().next_index(self.data.train_features.nrows());
        let reg = q.x.map(libm::exp).component_mul(q.y);
        Ok(Self::residual_grad(&self.data.train_features, &self.data.train_targets, row, q.y) + reg)
    }

    fn hvp_yy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector> {
        q.validate(self.dims())?;
        check_dim("hvp vector", self.data.dim(), v.len())?;
        let row = q.sample.clone().next_index(self.data.train_features.nrows());
        let a = self.data.train_features.row(row).transpose();
        let av = a.dot(v);
        Ok(a * av + q.x.map(libm::exp).component_mul(v))
    }

    fn jvp_xy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector> {
        q.validate(self.dims())?;
        check_dim("jvp vector", self.data.dim(), v.len())?;
        Ok(self.mixed(q.x, q.y, v))
    }

    fn upper_objective(&self, x: &Vector, y: &Vector) -> Result<f64> {
        self.check(x, y)?;
        let resid = &self.data.val_features * y - &self.data.val_targets;
        Ok(0.5 * resid.norm_squared() / self.data.val_features.nrows() as f64)
    }

    fn has_exact_lower_solution(&self) -> bool {
        true
    }

    fn has_exact_hypergradient(&self) -> bool {
        true
    }

    fn exact_lower_solution(&self, x: &Vector) -> Result<Vector> {
        check_dim("x", self.data.dim(), x.len())?;
        let feats = &self.data.train_features;
        let rhs = feats.tr_mul(&self.data.train_targets) / feats.nrows() as f64;
        Ok(cholesky(self.lower_hessian(x), "ridge normal equations")?.solve(&rhs))
    }

    fn exact_hypergradient(&self, x: &Vector) -> Result<Vector> {
        let y = self.exact_lower_solution(x)?;
        let gy = self.full_grad_y_f(x, &y)?;
        let w = cholesky(self.lower_hessian(x), "ridge normal equations")?.solve(&gy);
        Ok(-self.mixed(x, &y, &w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{default_step, finite_diff_grad};

    fn problem() -> RidgeHyper {
        RidgeHyper::new(RidgeData::synthesize(60, 30, 4, 0.3, 9).unwrap(), 3.0, 10.0).unwrap()
    }

    #[test]
    fn lower_solution_is_stationary() {
        let p = problem();
        let x = Vector::from_column_slice(&[0.1, -0.5, 1.0, 0.0]);
        let y = p.exact_lower_solution(&x).unwrap();
        assert!(p.full_grad_y_g(&x, &y).unwrap().amax() < 1e-12);
    }

    #[test]
    fn hypergradient_matches_finite_differences() {
        let p = problem();
        let x = Vector::from_column_slice(&[0.3, -0.2, -1.0, 0.5]);
        let exact = p.exact_hypergradient(&x).unwrap();
        let fd = finite_diff_grad(|z| p.hyper_objective(z).unwrap(), &x, default_step(&x)).unwrap();
        assert!((&fd - &exact).norm() <= 1e-5 * exact.norm(), "{fd} vs {exact}");
    }

    #[test]
    fn row_sampling_is_unbiased() {
        let p = problem();
        let x = Vector::from_column_slice(&[0.0, 0.5, -0.5, 0.2]);
        let y = Vector::from_column_slice(&[1.0, -1.0, 0.5, 0.0]);
        let n = 100_000;
        let mut stream = RandomStream::new(4, 0);
        let mut acc = Vector::zeros(4);
        for _ in 0..n {
            let q = OracleQuery::new(&x, &y, stream.take(1));
            acc += p.grad_y_g(&q).unwrap();
        }
        acc /= n as f64;
        let full = p.full_grad_y_g(&x, &y).unwrap();
        // per-sample spread is a few units here; 4 sd of the mean is well under 0.1
        assert!((acc - full).amax() < 0.1);
    }

    #[test]
    fn per_sample_hessian_is_strongly_convex() {
        let p = problem();
        let x = Vector::from_column_slice(&[1.0, -2.0, 0.0, 3.0]);
        let y = Vector::zeros(4);
        let mu = p.smoothness().mu;
        let mut s = RandomStream::new(2, 2);
        for _ in 0..50 {
            let v = s.gaussian_vec(4, 1.0);
            let q = OracleQuery::new(&x, &y, s.take(1));
            assert!(v.dot(&p.hvp_yy_g(&q, &v).unwrap()) >= mu * v.norm_squared() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn rejects_mismatched_split() {
        let d = RidgeData::synthesize(10, 5, 3, 0.1, 0).unwrap();
        let bad = RidgeData::new(d.train_features.clone(), d.val_targets.clone(), d.val_features, d.train_targets);
        assert!(bad.is_err());
    }
}
