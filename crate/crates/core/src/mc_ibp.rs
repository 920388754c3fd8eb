//! Integration by parts on the Monte Carlo sample space `(0,1)^N`.
//!
//! With the error structure whose gradient is `DF = (∂_n F · U_n(1-U_n))_n`
//! one has `E⟨DF, a⟩ = -E[F Σ a_n (1 - 2U_n)]`. The same device turns
//! derivatives of `E[Ψ(S_N)]` for the scheme
//! `S_{n+1} = S_n + σ(S_n) λ ξ(U_{n+1})` into expectations of `Ψ(S_N)`
//! times a weight.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::numerics::{normal_pdf, normal_quantile};
use crate::rng::{open_uniform, substream, Domain};
use crate::stats::Estimate;

/// Uniform draws within this distance of `{0, 1}` are redrawn.
pub const BOUNDARY_GUARD: f64 = 1e-12;

/// Highest tolerated share of rejected samples.
pub const MAX_REJECTION_RATE: f64 = 1e-3;

/// Map from a uniform draw to a scheme increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Xi {
    /// `Φ⁻¹(u)`.
    #[default]
    GaussianInverse,
    /// `ln(u / (1-u))`.
    Logistic,
    /// `u - ½`.
    Affine,
}

impl Xi {
    /// `(ξ, ξ', ξ'')` at `u`.
    pub fn eval(self, u: f64) -> (f64, f64, f64) {
        match self {
            Xi::GaussianInverse => {
                let x = normal_quantile(u);
                let p = normal_pdf(x);
                (x, 1.0 / p, x / (p * p))
            }
            Xi::Logistic => {
                let v = u * (1.0 - u);
                ((u / (1.0 - u)).ln(), 1.0 / v, (2.0 * u - 1.0) / (v * v))
            }
            Xi::Affine => (u - 0.5, 1.0, 0.0),
        }
    }

    /// Whether `ξ/ξ'` vanishes at both ends of `(0,1)`, which the weight
    /// formulas need for the boundary terms to drop out.
    pub fn boundary_terms_vanish(self) -> bool {
        !matches!(self, Xi::Affine)
    }
}

/// Diffusion coefficient of the scheme.
#[derive(Clone)]
pub enum SchemeVol {
    Constant(f64),
    /// `a + b x`.
    Affine { a: f64, b: f64 },
    /// `(σ, σ')`.
    Custom(Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>),
}

impl std::fmt::Debug for SchemeVol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchemeVol::Constant(s) => write!(f, "Constant({s})"),
            SchemeVol::Affine { a, b } => write!(f, "Affine({a}, {b})"),
            SchemeVol::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl SchemeVol {
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match self {
            SchemeVol::Constant(s) => (*s, 0.0),
            SchemeVol::Affine { a, b } => (a + b * x, *b),
            SchemeVol::Custom(f) => f(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteScheme {
    pub n_steps: usize,
    pub x: f64,
    pub lambda: f64,
    pub vol: SchemeVol,
    pub xi: Xi,
}

impl DiscreteScheme {
    pub fn new(n_steps: usize, x: f64, lambda: f64, vol: SchemeVol, xi: Xi) -> Result<Self> {
        if n_steps == 0 {
            return input("the scheme needs at least one step");
        }
        if !x.is_finite() {
            return input("initial value must be finite");
        }
        if !(lambda != 0.0 && lambda.is_finite()) {
            return input(format!("lambda must be finite and nonzero, got {lambda}"));
        }
        let (s, ds) = vol.eval(x);
        if !(s != 0.0 && s.is_finite() && ds.is_finite()) {
            return input(format!("sigma(x) must be finite and nonzero at x = {x}"));
        }
        Ok(Self { n_steps, x, lambda, vol, xi })
    }

    pub fn with_x(&self, x: f64) -> Self {
        Self { x, ..self.clone() }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    /// `S_N` driven by `u`.
    pub fn terminal(&self, u: &[f64]) -> f64 {
        u.iter().fold(self.x, |s, &v| s + self.vol.eval(s).0 * self.lambda * self.xi.eval(v).0)
    }

    fn require_regular_xi(&self) -> Result<()> {
        if self.xi.boundary_terms_vanish() {
            Ok(())
        } else {
            input(format!(
                "{:?} increments leave boundary terms in the integration by parts; use a map with ξ/ξ' → 0 at 0 and 1",
                self.xi
            ))
        }
    }
}

/// Uniform sample `index` of length `n` under `seed`.
pub fn uniform_sample(seed: u64, index: u64, n: usize) -> Vec<f64> {
    let mut rng = substream(seed, Domain::Uniform, 0, index);
    (0..n).map(|_| open_uniform(&mut rng, BOUNDARY_GUARD)).collect()
}

pub type SampleFn<'a> = dyn Fn(&[f64]) -> f64 + Sync + 'a;
pub type PartialsFn<'a> = dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a;

/// Partial derivatives by central differences, with steps shrunk near the
/// boundary so that `u ± h` stays inside `(0,1)`.
pub fn fd_partials(f: &SampleFn<'_>, u: &[f64]) -> Vec<f64> {
    let mut v = u.to_vec();
    (0..u.len())
        .map(|n| {
            let h = 1e-6f64.min(0.5 * u[n].min(1.0 - u[n]));
            v[n] = u[n] + h;
            let up = f(&v);
            v[n] = u[n] - h;
            let dn = f(&v);
            v[n] = u[n];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// `DF = (∂_n F(U) · U_n(1 - U_n))_n`; finite differences when no
/// partials are supplied.
pub fn discrete_gradient(f: &SampleFn<'_>, partials: Option<&PartialsFn<'_>>, u: &[f64]) -> Vec<f64> {
    let d = match partials {
        Some(p) => p(u),
        None => fd_partials(f, u),
    };
    d.iter().zip(u).map(|(g, v)| g * v * (1.0 - v)).collect()
}

/// Both sides of `E⟨DF, a⟩ = -E[F Σ a_n (1 - 2U_n)]` on shared samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IbpCheck {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Paired `lhs - rhs`.
    pub difference: Estimate,
}

impl IbpCheck {
    pub fn within(&self, sigmas: f64) -> bool {
        self.difference.mean.abs() <= sigmas * self.difference.std_error
    }
}

pub fn ibp_check(f: &SampleFn<'_>, partials: Option<&PartialsFn<'_>>, a: &[f64], n_samples: usize, seed: u64) -> Result<IbpCheck> {
    if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
        return input("direction a must be a nonempty finite vector");
    }
    if n_samples < 2 {
        return input("ibp_check needs at least 2 samples");
    }
    let rows: Vec<(f64, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let u = uniform_sample(seed, i, a.len());
            let g = discrete_gradient(f, partials, &u);
            let lhs: f64 = g.iter().zip(a).map(|(x, y)| x * y).sum();
            let rhs = -f(&u) * a.iter().zip(&u).map(|(an, v)| an * (1.0 - 2.0 * v)).sum::<f64>();
            (lhs, rhs)
        })
        .collect();
    let l: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let r: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(IbpCheck { lhs: Estimate::from_samples(&l), rhs: Estimate::from_samples(&r), difference: Estimate::from_samples(&d) })
}

/// Monte Carlo weight estimate with its rejection count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightEstimate {
    pub estimate: Estimate,
    pub rejected: usize,
}

/// Parameter of `E[Ψ(S_N)]` being differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    X,
    Lambda,
}

fn sample_weight(scheme: &DiscreteScheme, param: Param, u: &[f64]) -> Option<f64> {
    let lam = scheme.lambda;
    let w = match param {
        Param::X => {
            let (xi, d1, d2) = scheme.xi.eval(u[0]);
            let (s, ds) = scheme.vol.eval(scheme.x);
            if d1 == 0.0 {
                return None;
            }
            d2 * (1.0 + lam * ds * xi) / (lam * s * d1 * d1) - ds / s
        }
        Param::Lambda => {
            let mut acc = 0.0;
            for &v in u {
                let (xi, d1, d2) = scheme.xi.eval(v);
                if d1 == 0.0 {
                    return None;
                }
                acc += 1.0 - xi * d2 / (d1 * d1);
            }
            -acc / lam
        }
    };
    w.is_finite().then_some(w)
}

fn weight_estimator(
    scheme: &DiscreteScheme,
    psi: &(dyn Fn(f64) -> f64 + Sync),
    param: Param,
    n_samples: usize,
    seed: u64,
) -> Result<WeightEstimate> {
    scheme.require_regular_xi()?;
    if n_samples < 2 {
        return input("weight estimators need at least 2 samples");
    }
    let rows: Vec<Option<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let u = uniform_sample(seed, i, scheme.n_steps);
            sample_weight(scheme, param, &u).map(|w| psi(scheme.terminal(&u)) * w)
        })
        .collect();
    let rejected = rows.iter().filter(|r| r.is_none()).count();
    if rejected as f64 > MAX_REJECTION_RATE * n_samples as f64 {
        return Err(Error::Numeric(format!("{rejected} of {n_samples} samples had a vanishing or non-finite weight")));
    }
    let kept: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(WeightEstimate { estimate: Estimate::from_samples(&kept), rejected })
}

/// `d/dx E[Ψ(S_N)] = E[Ψ(S_N)(ξ''(1 + λσ'ξ)/(λσξ'²) - σ'/σ)]`, with `ξ`
/// and its derivatives at `U_1` and `σ` at `x`.
pub fn delta_weight_estimator(
    scheme: &DiscreteScheme,
    psi: &(dyn Fn(f64) -> f64 + Sync),
    n_samples: usize,
    seed: u64,
) -> Result<WeightEstimate> {
    weight_estimator(scheme, psi, Param::X, n_samples, seed)
}

/// `d/dλ E[Ψ(S_N)] = -(1/λ) E[Ψ(S_N) Σ_n d/du(ξ/ξ')(U_n)]`.
pub fn lambda_weight_estimator(
    scheme: &DiscreteScheme,
    psi: &(dyn Fn(f64) -> f64 + Sync),
    n_samples: usize,
    seed: u64,
) -> Result<WeightEstimate> {
    weight_estimator(scheme, psi, Param::Lambda, n_samples, seed)
}

/// Central difference with common random numbers, and the same at half
/// the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdEstimate {
    pub estimate: Estimate,
    pub half_step: Estimate,
    pub step: f64,
}

fn bumped(scheme: &DiscreteScheme, param: Param, h: f64) -> DiscreteScheme {
    match param {
        Param::X => scheme.with_x(scheme.x + h),
        Param::Lambda => scheme.with_lambda(scheme.lambda + h),
    }
}

fn default_step(scheme: &DiscreteScheme, param: Param) -> f64 {
    let scale = match param {
        Param::X => scheme.x.abs().max(1.0),
        Param::Lambda => scheme.lambda.abs(),
    };
    1e-3 * scale
}

/// Finite-difference oracle for [`delta_weight_estimator`] and
/// [`lambda_weight_estimator`]; `h = 1e-3·scale` unless given.
pub fn fd_derivative(
    scheme: &DiscreteScheme,
    psi: &(dyn Fn(f64) -> f64 + Sync),
    param: Param,
    step: Option<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<FdEstimate> {
    let h = step.unwrap_or_else(|| default_step(scheme, param));
    if !(h > 0.0) {
        return input("finite-difference step must be positive");
    }
    if n_samples < 2 {
        return input("finite differences need at least 2 samples");
    }
    let (up, dn) = (bumped(scheme, param, h), bumped(scheme, param, -h));
    let (up2, dn2) = (bumped(scheme, param, 0.5 * h), bumped(scheme, param, -0.5 * h));
    let rows: Vec<(f64, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let u = uniform_sample(seed, i, scheme.n_steps);
            let d = (psi(up.terminal(&u)) - psi(dn.terminal(&u))) / (2.0 * h);
            let d2 = (psi(up2.terminal(&u)) - psi(dn2.terminal(&u))) / h;
            (d, d2)
        })
        .collect();
    let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(FdEstimate { estimate: Estimate::from_samples(&a), half_step: Estimate::from_samples(&b), step: h })
}

/// A weight estimator against its finite-difference oracle on the same
/// samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightCheck {
    pub weight: WeightEstimate,
    pub fd: FdEstimate,
    /// Paired weight minus difference quotient.
    pub difference: Estimate,
    pub passed: bool,
}

/// Runs the weight estimator and the finite-difference oracle on shared
/// samples; passes when the paired difference is within 3 standard errors.
pub fn weight_check(
    scheme: &DiscreteScheme,
    psi: &(dyn Fn(f64) -> f64 + Sync),
    param: Param,
    n_samples: usize,
    seed: u64,
) -> Result<WeightCheck> {
    let weight = weight_estimator(scheme, psi, param, n_samples, seed)?;
    let fd = fd_derivative(scheme, psi, param, None, n_samples, seed)?;
    let h = fd.step;
    let (up, dn) = (bumped(scheme, param, h), bumped(scheme, param, -h));
    let diffs: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .filter_map(|i| {
            let u = uniform_sample(seed, i, scheme.n_steps);
            let w = sample_weight(scheme, param, &u)?;
            let q = (psi(up.terminal(&u)) - psi(dn.terminal(&u))) / (2.0 * h);
            Some(psi(scheme.terminal(&u)) * w - q)
        })
        .collect();
    let difference = Estimate::from_samples(&diffs);
    let passed = difference.mean.abs() <= 3.0 * difference.std_error;
    Ok(WeightCheck { weight, fd, difference, passed })
}
