//! The smooth bump family on `[0, 1]³`:
//!
//! ```text
//! q(x, y, z) = 1 + γ(y, z) η(x),
//! η(x)    = ρ Σ_k ν_k h_{k,m}(x),
//! γ(y, z) = ρ² Σ_{i,j} δ_ij h_{i,m'}(y) h_{j,m'}(z),
//! h_{k,m}(x) = √m h(mx - k + 1) on the k-th cell of width 1/m,
//! ```
//!
//! with Rademacher signs `ν`, `δ`. The base bump is `h = c ψ'` where
//! `ψ(x) = g(x)(cos 2πx - κ_ψ)`, `g(x) = exp(-1/(x(1-x)))`, `κ_ψ` makes
//! `∫ψ = 0` and `c` makes `∫h² = 1`. Then `∫h = 0`, `h(x) = -h(1-x)`, and
//! `H(x) = ∫₀ˣ h = c ψ(x)` integrates to zero.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GeneratorError;
use crate::data::{Dataset, Matrix};
use crate::rng::RngStream;
use crate::special::{integrate_adaptive, GaussLegendre};

/// The base bump with its cached constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HSpec {
    pub kappa_psi: f64,
    /// Normalizer `c` in `h = c ψ'`.
    pub scale: f64,
    /// `c₁ = ∫|h|`.
    pub c1: f64,
    pub h_sup: f64,
    pub h_prime_sup: f64,
    /// `c_∞ = max(‖h‖∞, ‖h'‖∞)`.
    pub c_inf: f64,
    /// `∫₀¹ H²`.
    pub int_big_h_sq: f64,
}

fn g(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    (-1.0 / (x * (1.0 - x))).exp()
}

/// `(g, g', g'')` with `g = exp(φ)`, `φ = -1/s`, `s = x(1 - x)`.
fn g_derivs(x: f64) -> (f64, f64, f64) {
    if x <= 0.0 || x >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = x * (1.0 - x);
    let gx = (-1.0 / s).exp();
    if gx == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let u = 1.0 - 2.0 * x;
    let d1 = u / (s * s);
    let d2 = (-2.0 * s - 2.0 * u * u) / (s * s * s);
    (gx, gx * d1, gx * (d2 + d1 * d1))
}

fn psi(x: f64, k: f64) -> f64 {
    g(x) * ((2.0 * PI * x).cos() - k)
}

fn psi_prime(x: f64, k: f64) -> f64 {
    let (g0, g1, _) = g_derivs(x);
    let w = 2.0 * PI * x;
    g1 * (w.cos() - k) - g0 * 2.0 * PI * w.sin()
}

fn psi_second(x: f64, k: f64) -> f64 {
    let (g0, g1, g2) = g_derivs(x);
    let w = 2.0 * PI * x;
    g2 * (w.cos() - k) - 2.0 * g1 * 2.0 * PI * w.sin() - g0 * 4.0 * PI * PI * w.cos()
}

/// Maximum of `|f|` on `[0, 1]`: dense grid, then golden-section refinement.
fn sup_abs<F: Fn(f64) -> f64>(f: F) -> f64 {
    let n = 20_000;
    let (mut best, mut arg) = (0.0, 0.0);
    for i in 0..=n {
        let x = i as f64 / n as f64;
        let v = f(x).abs();
        if v > best {
            best = v;
            arg = x;
        }
    }
    let (mut a, mut b) = ((arg - 1.0 / n as f64).max(0.0), (arg + 1.0 / n as f64).min(1.0));
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c).abs() > f(d).abs() {
            b = d;
        } else {
            a = c;
        }
    }
    best.max(f(0.5 * (a + b)).abs())
}

/// Builds the bump and its constants by adaptive quadrature.
pub fn make_h_spec() -> HSpec {
    const TOL: f64 = 1e-14;
    let int = |f: &dyn Fn(f64) -> f64| integrate_adaptive(f, 0.0, 1.0, TOL).0;
    let kappa_psi = int(&|x| g(x) * (2.0 * PI * x).cos()) / int(&g);
    let scale = 1.0 / int(&|x| psi_prime(x, kappa_psi).powi(2)).sqrt();
    let c1 = scale * int(&|x| psi_prime(x, kappa_psi).abs());
    let int_big_h_sq = scale * scale * int(&|x| psi(x, kappa_psi).powi(2));
    let h_sup = scale * sup_abs(|x| psi_prime(x, kappa_psi));
    let h_prime_sup = scale * sup_abs(|x| psi_second(x, kappa_psi));
    HSpec {
        kappa_psi,
        scale,
        c1,
        h_sup,
        h_prime_sup,
        c_inf: h_sup.max(h_prime_sup),
        int_big_h_sq,
    }
}

/// Process-wide cached [`make_h_spec`].
pub fn h_spec() -> HSpec {
    static SPEC: OnceLock<HSpec> = OnceLock::new();
    *SPEC.get_or_init(make_h_spec)
}

impl HSpec {
    pub fn h(&self, x: f64) -> f64 {
        self.scale * psi_prime(x, self.kappa_psi)
    }

    pub fn h_prime(&self, x: f64) -> f64 {
        self.scale * psi_second(x, self.kappa_psi)
    }

    /// `H(x) = ∫₀ˣ h`.
    pub fn big_h(&self, x: f64) -> f64 {
        self.scale * psi(x, self.kappa_psi)
    }
}

/// Parameters of one member of the bump family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderFamilyParams {
    pub rho: f64,
    pub m: usize,
    pub m_prime: usize,
    /// Signs `ν_k`, length `m`.
    pub nu: Vec<i8>,
    /// Signs `δ_ij`, row-major `m' × m'`.
    pub delta_mat: Vec<i8>,
    pub h: HSpec,
}

impl HolderFamilyParams {
    pub fn new(rho: f64, m: usize, m_prime: usize, nu: Vec<i8>, delta_mat: Vec<i8>) -> Result<Self, GeneratorError> {
        let p = Self {
            rho,
            m,
            m_prime,
            nu,
            delta_mat,
            h: h_spec(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Fresh Rademacher signs from `stream`.
    pub fn random(rho: f64, m: usize, m_prime: usize, stream: RngStream) -> Result<Self, GeneratorError> {
        let mut rng = stream.rng();
        let mut sign = || if rng.random::<bool>() { 1 } else { -1 };
        let nu = (0..m).map(|_| sign()).collect();
        let delta_mat = (0..m_prime * m_prime).map(|_| sign()).collect();
        Self::new(rho, m, m_prime, nu, delta_mat)
    }

    /// Deterministic checkerboard signs `ν_k = (-1)^k`, `δ_ij = (-1)^{i+j}`.
    pub fn fixed(rho: f64, m: usize, m_prime: usize) -> Result<Self, GeneratorError> {
        let alt = |k: usize| if k.is_multiple_of(2) { 1 } else { -1 };
        let nu = (0..m).map(alt).collect();
        let delta_mat = (0..m_prime * m_prime).map(|k| alt(k / m_prime + k % m_prime)).collect();
        Self::new(rho, m, m_prime, nu, delta_mat)
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |s: String| Err(GeneratorError::InvalidParameter(s));
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad(format!("rho must be finite and nonnegative, got {}", self.rho));
        }
        if self.m == 0 || self.m_prime == 0 {
            return bad("m and m' must be positive".into());
        }
        if self.nu.len() != self.m || self.delta_mat.len() != self.m_prime * self.m_prime {
            return bad("sign arrays must have lengths m and m'^2".into());
        }
        if self.nu.iter().chain(&self.delta_mat).any(|&s| s != 1 && s != -1) {
            return bad("signs must be +1 or -1".into());
        }
        Ok(())
    }

    /// `ρ³ √m m' c_∞³`; at most one for a bona fide member.
    pub fn bona_fide_ratio(&self) -> f64 {
        self.rho.powi(3) * (self.m as f64).sqrt() * self.m_prime as f64 * self.h.c_inf.powi(3)
    }

    pub fn is_bona_fide(&self) -> bool {
        self.bona_fide_ratio() <= 1.0
    }

    /// `ρ³ √m m' ‖h‖∞³`, the sup of `|γ η|`; at most one keeps the density in `[0, 2]`.
    pub fn density_ratio(&self) -> f64 {
        self.rho.powi(3) * (self.m as f64).sqrt() * self.m_prime as f64 * self.h.h_sup.powi(3)
    }

    /// `(cell index, √k h(kt - cell))` for the rescaled bump grid of `k` cells.
    fn cell_bump(&self, k: usize, t: f64) -> (usize, f64) {
        let scaled = k as f64 * t;
        let cell = (scaled.floor().max(0.0) as usize).min(k - 1);
        (cell, (k as f64).sqrt() * self.h.h(scaled - cell as f64))
    }

    pub fn eta(&self, x: f64) -> f64 {
        let (k, v) = self.cell_bump(self.m, x);
        self.rho * f64::from(self.nu[k]) * v
    }

    pub fn gamma(&self, y: f64, z: f64) -> f64 {
        let (i, hy) = self.cell_bump(self.m_prime, y);
        let (j, hz) = self.cell_bump(self.m_prime, z);
        self.rho * self.rho * f64::from(self.delta_mat[i * self.m_prime + j]) * hy * hz
    }

    pub fn density(&self, x: f64, y: f64, z: f64) -> f64 {
        1.0 + self.gamma(y, z) * self.eta(x)
    }
}

fn rejection_sample(n: usize, params: &HolderFamilyParams, stream: RngStream) -> Dataset {
    let mut rng = stream.rng();
    let (mut x, mut y, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    while y.len() < n {
        let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        if 2.0 * rng.random::<f64>() <= params.density(a, b, c) {
            x.push(a);
            y.push(b);
            z.push(c);
        }
    }
    Dataset::new(Matrix::column(&x), y, Matrix::column(&z)).expect("finite draws")
}

/// Rejection sampling under the envelope `2 · Uniform([0,1]³)`; requires the
/// bona fide bound `ρ³ √m m' c_∞³ <= 1`.
pub fn sample_holder(n: usize, params: &HolderFamilyParams, stream: RngStream) -> Result<Dataset, GeneratorError> {
    params.validate()?;
    if !params.is_bona_fide() {
        return Err(GeneratorError::NotBonaFide {
            ratio: params.bona_fide_ratio(),
        });
    }
    Ok(rejection_sample(n, params, stream))
}

/// As [`sample_holder`] but only requires the density to stay in `[0, 2]`
/// (`ρ³ √m m' ‖h‖∞³ <= 1`), which admits much larger `ρ`.
pub fn sample_holder_valid_density(
    n: usize,
    params: &HolderFamilyParams,
    stream: RngStream,
) -> Result<Dataset, GeneratorError> {
    params.validate()?;
    if params.density_ratio() > 1.0 {
        return Err(GeneratorError::NotBonaFide {
            ratio: params.density_ratio(),
        });
    }
    Ok(rejection_sample(n, params, stream))
}

/// Constants `(K₁, K₂)` of the shrinking sequence
/// `m = m' = ⌈K₁ n^{2/(4s+3)}⌉`, `ρ³ = K₂ n^{-(2s+3)/(4s+3)}`, solved from
/// `K₂ K₁^{3/2+s} = L / (8 c_∞³)` and `K₂ K₁^{3/2} = 12 Δ₀ / c₁³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderScaling {
    pub s: f64,
    pub k1: f64,
    pub k2: f64,
}

impl HolderScaling {
    pub fn from_constants(s: f64, big_l: f64, delta0: f64, h: &HSpec) -> Result<Self, GeneratorError> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(GeneratorError::InvalidParameter(format!("s must lie in (0, 1], got {s}")));
        }
        if !(big_l > 1.0 && big_l.is_finite()) {
            return Err(GeneratorError::InvalidParameter(format!("L must exceed 1, got {big_l}")));
        }
        if !(delta0 > 0.0 && delta0.is_finite()) {
            return Err(GeneratorError::InvalidParameter(format!("delta0 must be positive, got {delta0}")));
        }
        let k1 = (big_l * h.c1.powi(3) / (96.0 * delta0 * h.c_inf.powi(3))).powf(1.0 / s);
        let k2 = 12.0 * delta0 / (h.c1.powi(3) * k1.powf(1.5));
        Ok(Self { s, k1, k2 })
    }

    /// `(m, ρ)` at sample size `n`.
    pub fn m_rho(&self, n: usize) -> (usize, f64) {
        let n = n as f64;
        let denom = 4.0 * self.s + 3.0;
        let m = (self.k1 * n.powf(2.0 / denom)).ceil().max(1.0) as usize;
        let rho = (self.k2 * n.powf(-(2.0 * self.s + 3.0) / denom)).cbrt();
        (m, rho)
    }

    /// Parameters at sample size `n` with fresh signs from `stream`.
    pub fn params_for_n(&self, n: usize, stream: RngStream) -> Result<HolderFamilyParams, GeneratorError> {
        let (m, rho) = self.m_rho(n);
        let p = HolderFamilyParams::random(rho, m, m, stream)?;
        if !p.is_bona_fide() {
            return Err(GeneratorError::NotBonaFide {
                ratio: p.bona_fide_ratio(),
            });
        }
        Ok(p)
    }
}

pub fn holder_params_for_n(
    n: usize,
    s: f64,
    big_l: f64,
    delta0: f64,
    stream: RngStream,
) -> Result<HolderFamilyParams, GeneratorError> {
    HolderScaling::from_constants(s, big_l, delta0, &h_spec())?.params_for_n(n, stream)
}

/// Population coefficient `6 ρ⁶ m ∫H²` of a bump-family member.
pub fn holder_population_xi(params: &HolderFamilyParams) -> f64 {
    6.0 * params.rho.powi(6) * params.m as f64 * params.h.int_big_h_sq
}

/// Tensor Gauss–Legendre rule: `order` nodes per cell on equal cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub x_cells: usize,
    pub yz_cells: usize,
    pub order: usize,
}

impl QuadratureSpec {
    /// Cells aligned with the bump grid of `params`.
    pub fn for_params(params: &HolderFamilyParams, order: usize) -> Self {
        Self {
            x_cells: params.m,
            yz_cells: params.m_prime,
            order,
        }
    }
}

fn cell_nodes(rule: &GaussLegendre, cells: usize) -> Vec<(f64, f64)> {
    (0..cells)
        .flat_map(|c| rule.points(c as f64 / cells as f64, (c + 1) as f64 / cells as f64))
        .collect()
}

/// Brute-force population coefficient of a density on `[0, 1]³` whose
/// `(X, Y)` marginal is uniform:
///
/// `ξ = 6 ∫ E[Var{P(Y >= t | X, Z) | X}] dt`.
///
/// Conditional probabilities, variances and the outer integrals are all
/// evaluated with the tensor rule of `spec`; the integrand should be smooth
/// within each cell.
pub fn population_xi_reference<F>(density: F, spec: QuadratureSpec) -> Result<f64, GeneratorError>
where
    F: Fn(f64, f64, f64) -> f64 + Sync,
{
    if spec.x_cells == 0 || spec.yz_cells == 0 || spec.order == 0 {
        return Err(GeneratorError::QuadratureFailure("empty quadrature rule".into()));
    }
    let rule = GaussLegendre::new(spec.order);
    let xs = cell_nodes(&rule, spec.x_cells);
    let ys = cell_nodes(&rule, spec.yz_cells);
    let k = spec.order;
    let cells = spec.yz_cells;
    let width = 1.0 / cells as f64;
    // t nodes coincide with y nodes; ∫_t^1 splits into the rest of t's cell
    // (its own rule) plus whole cells above.
    let partial: Vec<Vec<(f64, f64)>> = ys
        .iter()
        .enumerate()
        .map(|(l, &(t, _))| rule.points(t, (l / k + 1) as f64 * width).collect())
        .collect();

    let per_x: Vec<Result<(f64, Vec<f64>), GeneratorError>> = xs
        .par_iter()
        .map(|&(x, _)| {
            let mut fy = vec![0.0; ys.len()];
            let mut e1 = vec![0.0; ys.len()];
            let mut e2 = vec![0.0; ys.len()];
            let mut marg_y = vec![0.0; ys.len()];
            let mut qx = 0.0;
            for &(z, wz) in &ys {
                for (v, &(y, _)) in fy.iter_mut().zip(&ys) {
                    *v = density(x, y, z);
                    if !v.is_finite() || *v < 0.0 {
                        return Err(GeneratorError::QuadratureFailure(format!(
                            "density is {v} at ({x}, {y}, {z})"
                        )));
                    }
                }
                let cell_int: Vec<f64> = (0..cells)
                    .map(|c| (0..k).map(|j| ys[c * k + j].1 * fy[c * k + j]).sum())
                    .collect();
                let qxz: f64 = cell_int.iter().sum();
                if qxz <= 0.0 {
                    return Err(GeneratorError::QuadratureFailure(format!("zero density slice at ({x}, {z})")));
                }
                qx += wz * qxz;
                for (l, pts) in partial.iter().enumerate() {
                    let above: f64 = cell_int[l / k + 1..].iter().sum();
                    let within: f64 = pts.iter().map(|&(y, w)| w * density(x, y, z)).sum();
                    let prob = (above + within) / qxz;
                    e1[l] += wz * qxz * prob;
                    e2[l] += wz * qxz * prob * prob;
                    marg_y[l] += wz * fy[l];
                }
            }
            if marg_y.iter().any(|&v| (v - 1.0).abs() > 1e-8) {
                return Err(GeneratorError::QuadratureFailure(format!(
                    "(X, Y) marginal is not uniform at x = {x}"
                )));
            }
            // Var under Z | X = x, weighted by the density of X.
            let var: Vec<f64> = e1
                .iter()
                .zip(&e2)
                .map(|(&a, &b)| b / qx - (a / qx).powi(2))
                .map(|v| v * qx)
                .collect();
            Ok((qx, var))
        })
        .collect();

    let mut numerator = 0.0;
    for ((_, wx), r) in xs.iter().zip(per_x) {
        let (_, var) = r?;
        numerator += wx * var.iter().zip(&ys).map(|(v, &(_, wt))| wt * v).sum::<f64>();
    }
    Ok(numerator / (1.0 / 6.0))
}
