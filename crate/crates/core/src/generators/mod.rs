//! Samplers for the null and alternative families.
//!
//! - [`sample_null_uniform`]: independent uniforms on the unit cube;
//! - [`sample_rotation`]: Gaussian rotation alternatives
//!   `(X*, Y*, Z* + Δ(A X* + b Y*))`;
//! - [`sample_farlie`]: Farlie alternatives on uniform marginals;
//! - [`holder`]: the smooth bump family with its population coefficient.

pub mod holder;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Matrix};
use crate::rng::RngStream;

pub use holder::{
    h_spec, holder_params_for_n, holder_population_xi, make_h_spec, population_xi_reference, sample_holder,
    sample_holder_valid_density, HSpec, HolderFamilyParams, HolderScaling, QuadratureSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("Farlie parameter must satisfy |delta| <= 1, got {0}")]
    InvalidDelta(f64),
    #[error("bump density is not bona fide: rho^3 sqrt(m) m' c^3 = {ratio} > 1")]
    NotBonaFide { ratio: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),
}

/// `n` i.i.d. points uniform on `[0, 1]^{p + 1 + q}`.
pub fn sample_null_uniform(n: usize, p: usize, q: usize, stream: RngStream) -> Dataset {
    let mut rng = stream.rng();
    let (mut x, mut y, mut z) = (Vec::with_capacity(n * p), Vec::with_capacity(n), Vec::with_capacity(n * q));
    for _ in 0..n {
        x.extend((0..p).map(|_| rng.random::<f64>()));
        y.push(rng.random::<f64>());
        z.extend((0..q).map(|_| rng.random::<f64>()));
    }
    Dataset::new(Matrix::new(n, p, x).unwrap(), y, Matrix::new(n, q, z).unwrap()).expect("finite uniforms")
}

/// Gaussian rotation alternative.
///
/// `(X*, Z*)` is centered normal with covariance `[[cov_x, cov_xz], [cov_xzᵀ, cov_z]]`,
/// `Y* ~ N(0, var_y)` independent of it, and the sample is
/// `(X*, Y*, Z* + Δ(A X* + b Y*))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationParams {
    pub cov_x: Vec<Vec<f64>>,
    pub var_y: f64,
    pub cov_z: Vec<Vec<f64>>,
    /// `p × q` cross-covariance of `X*` and `Z*`.
    pub cov_xz: Vec<Vec<f64>>,
    /// `q × p` matrix `A`.
    pub a_mat: Vec<Vec<f64>>,
    /// Length-`q` vector `b`, not identically zero.
    pub b_vec: Vec<f64>,
    pub delta: f64,
}

impl RotationParams {
    /// Identity covariances, `var_y = 1`, no cross-covariance.
    pub fn standard(p: usize, q: usize, a_mat: Vec<Vec<f64>>, b_vec: Vec<f64>, delta: f64) -> Self {
        let eye = |k: usize| (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        Self {
            cov_x: eye(p),
            var_y: 1.0,
            cov_z: eye(q),
            cov_xz: vec![vec![0.0; q]; p],
            a_mat,
            b_vec,
            delta,
        }
    }

    pub fn p(&self) -> usize {
        self.cov_x.len()
    }

    pub fn q(&self) -> usize {
        self.cov_z.len()
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self { delta, ..self.clone() }
    }

    fn joint_covariance(&self) -> Result<DMatrix<f64>, GeneratorError> {
        let (p, q) = (self.p(), self.q());
        let bad = |what: &str| GeneratorError::InvalidCovariance(what.to_string());
        if p == 0 || q == 0 {
            return Err(bad("X and Z must both have at least one coordinate"));
        }
        if self.cov_x.iter().any(|r| r.len() != p) || self.cov_z.iter().any(|r| r.len() != q) {
            return Err(bad("covariance blocks must be square"));
        }
        if self.cov_xz.len() != p || self.cov_xz.iter().any(|r| r.len() != q) {
            return Err(bad("cross-covariance must be p x q"));
        }
        if self.a_mat.len() != q || self.a_mat.iter().any(|r| r.len() != p) {
            return Err(GeneratorError::InvalidParameter("A must be q x p".into()));
        }
        if self.b_vec.len() != q || self.b_vec.iter().all(|&v| v == 0.0) {
            return Err(GeneratorError::InvalidParameter("b must have length q and be nonzero".into()));
        }
        if !(self.var_y.is_finite() && self.var_y >= 0.0) {
            return Err(bad("var_y must be nonnegative"));
        }
        if !self.delta.is_finite() {
            return Err(GeneratorError::InvalidParameter("delta must be finite".into()));
        }
        let d = p + q;
        let s = DMatrix::from_fn(d, d, |i, j| match (i < p, j < p) {
            (true, true) => self.cov_x[i][j],
            (false, false) => self.cov_z[i - p][j - p],
            (true, false) => self.cov_xz[i][j - p],
            (false, true) => self.cov_xz[j][i - p],
        });
        if s.iter().any(|v| !v.is_finite()) || (&s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
            return Err(bad("joint covariance must be finite and symmetric"));
        }
        Ok(s)
    }

    /// A square root `L` with `L Lᵀ = Σ` (eigen-decomposition, so positive
    /// semidefinite blocks are allowed).
    fn covariance_root(&self) -> Result<DMatrix<f64>, GeneratorError> {
        let s = self.joint_covariance()?;
        let scale = s.amax().max(1.0);
        let eig = SymmetricEigen::new(s);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
            return Err(GeneratorError::InvalidCovariance("joint covariance is not positive semidefinite".into()));
        }
        let sqrt_l = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_l))
    }
}

pub fn sample_rotation(n: usize, params: &RotationParams, stream: RngStream) -> Result<Dataset, GeneratorError> {
    let root = params.covariance_root()?;
    let (p, q) = (params.p(), params.q());
    let sd_y = params.var_y.sqrt();
    let mut rng = stream.rng();
    let (mut x, mut y, mut z) = (Vec::with_capacity(n * p), Vec::with_capacity(n), Vec::with_capacity(n * q));
    let mut w = nalgebra::DVector::<f64>::zeros(p + q);
    for _ in 0..n {
        w.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let xz = &root * &w;
        let ystar = sd_y * rng.sample::<f64, _>(StandardNormal);
        x.extend(xz.iter().take(p));
        y.push(ystar);
        for k in 0..q {
            let ax: f64 = (0..p).map(|j| params.a_mat[k][j] * xz[j]).sum();
            z.push(xz[p + k] + params.delta * (ax + params.b_vec[k] * ystar));
        }
    }
    Dataset::new(Matrix::new(n, p, x).unwrap(), y, Matrix::new(n, q, z).unwrap())
        .map_err(|e| GeneratorError::InvalidParameter(e.to_string()))
}

/// Farlie alternative on independent uniform `(X*, Z*)`: `Y | (x, z)` has
/// density `1 + Δ a (1 - 2y)` on `[0, 1]` with `a = 1 - 2xz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FarlieParams {
    pub delta: f64,
}

/// Inverse of the CDF `y (1 + c (1 - y))` of the density `1 + c(1 - 2y)`,
/// written in the cancellation-free form of the quadratic root.
pub fn farlie_inverse_cdf(c: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let b = 1.0 + c;
    2.0 * u / (b + (b * b - 4.0 * c * u).max(0.0).sqrt())
}

pub fn sample_farlie(n: usize, params: FarlieParams, stream: RngStream) -> Result<Dataset, GeneratorError> {
    if params.delta.is_nan() || params.delta.abs() > 1.0 {
        return Err(GeneratorError::InvalidDelta(params.delta));
    }
    let mut rng = stream.rng();
    let (mut x, mut y, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (xi, zi, u): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let a = 1.0 - 2.0 * xi * zi;
        x.push(xi);
        y.push(farlie_inverse_cdf(params.delta * a, u));
        z.push(zi);
    }
    Ok(Dataset::new(Matrix::column(&x), y, Matrix::column(&z)).expect("finite draws"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::xi_n;
    use crate::stats::{ks_distance, mean};
    use crate::TieBreak;

    #[test]
    fn null_uniform_marginals_and_determinism() {
        let d = sample_null_uniform(100_000, 1, 1, RngStream::root(1));
        for col in [d.x().as_slice(), d.y(), d.z().as_slice()] {
            assert!(ks_distance(col, |v| v.clamp(0.0, 1.0)) < 0.01);
        }
        assert_eq!(d, sample_null_uniform(100_000, 1, 1, RngStream::root(1)));
    }

    #[test]
    fn null_xi_is_near_zero() {
        let d = sample_null_uniform(5000, 1, 1, RngStream::root(2));
        let v = xi_n(&d, TieBreak::lowest_index()).unwrap().value;
        // sd of ξ_n under the null is about sqrt(2.6 / n) ≈ 0.023.
        assert!(v.abs() < 0.1, "{v}");
    }

    fn rot(delta: f64) -> RotationParams {
        RotationParams::standard(1, 1, vec![vec![0.5]], vec![1.0], delta)
    }

    #[test]
    fn rotation_keeps_x_and_y() {
        let s = RngStream::root(3);
        let a = sample_rotation(1000, &rot(0.0), s).unwrap();
        let b = sample_rotation(1000, &rot(0.7), s).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        assert_ne!(a.z(), b.z());
    }

    #[test]
    fn rotation_cross_moment() {
        let n = 100_000;
        let delta = 0.4;
        let d = sample_rotation(n, &rot(delta), RngStream::root(4)).unwrap();
        let zy: Vec<f64> = (0..n).map(|i| d.z().row(i)[0] * d.y()[i]).collect();
        let cov = mean(&zy) - mean(d.z().as_slice()) * mean(d.y());
        let se = crate::stats::variance(&zy).sqrt() / (n as f64).sqrt();
        assert!((cov - delta).abs() < 4.0 * se, "{cov}");
    }

    #[test]
    fn rotation_validates_parameters() {
        let mut p = rot(0.1);
        p.b_vec = vec![0.0];
        assert!(matches!(sample_rotation(10, &p, RngStream::root(0)), Err(GeneratorError::InvalidParameter(_))));
        let mut p = rot(0.1);
        p.cov_x = vec![vec![-1.0]];
        assert!(matches!(sample_rotation(10, &p, RngStream::root(0)), Err(GeneratorError::InvalidCovariance(_))));
        let mut p = rot(0.1);
        p.cov_xz = vec![vec![1.0]];
        // [[1, 1], [1, 1]] is singular but semidefinite.
        assert!(sample_rotation(10, &p, RngStream::root(0)).is_ok());
    }

    #[test]
    fn farlie_inverse_cdf_examples() {
        assert_eq!(farlie_inverse_cdf(0.0, 0.37), 0.37);
        let y = farlie_inverse_cdf(1.0, 0.5);
        assert!((y - (2.0 - 2f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((y * (1.0 + (1.0 - y)) - 0.5).abs() < 1e-15);
        for &c in &[-1.0, -0.3, 1e-12, 0.5, 1.0] {
            for &u in &[0.0, 0.1, 0.5, 0.9, 1.0] {
                let y = farlie_inverse_cdf(c, u);
                assert!((y * (1.0 + c * (1.0 - y)) - u).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn farlie_marginal_of_y() {
        // E[1 - 2XZ] = 1/2 for independent uniforms, so Y has density
        // 1 + (Δ/2)(1 - 2y) rather than the uniform one.
        let delta = 1.0;
        let d = sample_farlie(100_000, FarlieParams { delta }, RngStream::root(5)).unwrap();
        let cdf = |v: f64| {
            let v = v.clamp(0.0, 1.0);
            v + 0.5 * delta * v * (1.0 - v)
        };
        assert!(ks_distance(d.y(), cdf) < 0.01);
        assert!(ks_distance(d.y(), |v| v.clamp(0.0, 1.0)) > 0.1);
        let d0 = sample_farlie(10, FarlieParams { delta: 0.0 }, RngStream::root(5)).unwrap();
        let mut rng = RngStream::root(5).rng();
        for i in 0..10 {
            let (_, _, u): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            assert_eq!(d0.y()[i], u);
        }
        assert!(sample_farlie(1, FarlieParams { delta: 1.5 }, RngStream::root(0)).is_err());
    }

    #[test]
    fn farlie_conditional_density_integrates_to_one() {
        for &c in &[-1.0, -0.2, 0.0, 0.6, 1.0] {
            let cdf_at_one = 1.0 * (1.0 + c * (1.0 - 1.0));
            assert_eq!(cdf_at_one, 1.0);
            let v = crate::special::GaussLegendre::new(4).integrate(0.0, 1.0, |y| 1.0 + c * (1.0 - 2.0 * y));
            assert!((v - 1.0).abs() < 1e-15);
        }
    }
}
