//! Discretized Wiener space with its error structures.
//!
//! Paths are sampled as independent Gaussian increments on a [`TimeGrid`],
//! each with an independent companion path used both for the
//! Ornstein-Uhlenbeck perturbation
//! `dB' = sqrt(e^-θ) dB + sqrt(1 - e^-θ) dB̂` and for the sharp derivative.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{input, Error, Result};
use crate::error_algebra::RealFn;
use crate::numerics::{gauss_hermite_cached, integrate, integrate_to_infinity};
use crate::rng::{normal, substream, Domain};

/// Increasing times `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t: Vec<f64>) -> Result<Self> {
        if t.len() < 2 {
            return input("a time grid needs at least one step");
        }
        if t[0] != 0.0 {
            return input("a time grid starts at 0");
        }
        if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[1] <= w[0]) {
            return input("grid times must be finite and strictly increasing");
        }
        Ok(Self { t })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        Self::uniform_with(horizon, steps, &[])
    }

    /// Uniform grid with extra points merged in (points outside `(0, T)` and
    /// points already on the grid are ignored).
    pub fn uniform_with(horizon: f64, steps: usize, extra: &[f64]) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return input(format!("uniform grid needs T > 0 and n >= 1, got T={horizon}, n={steps}"));
        }
        let mut t: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        let tol = 1e-12 * horizon;
        for &e in extra {
            if e > tol && e < horizon - tol && t.iter().all(|s| (s - e).abs() > tol) {
                t.push(e);
            }
        }
        t.sort_by(f64::total_cmp);
        Self::new(t)
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn steps(&self) -> usize {
        self.t.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.t[k + 1] - self.t[k]
    }

    /// Index of the grid point equal to `t` (up to rounding).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * self.horizon();
        self.t
            .iter()
            .position(|s| (s - t).abs() <= tol)
            .ok_or_else(|| Error::Input(format!("time {t} is not a grid point")))
    }

    /// Trapezoid rule for `f` on the grid.
    pub fn trapezoid<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let vals: Vec<f64> = self.t.iter().map(|&s| f(s)).collect();
        (0..self.steps()).map(|k| 0.5 * self.dt(k) * (vals[k] + vals[k + 1])).sum()
    }
}

/// Deterministic integrand of a Wiener integral.
#[derive(Clone)]
pub enum Integrand {
    /// `1_{[0,t]}`, i.e. the integral is `B_t`.
    Indicator(f64),
    Function(RealFn),
}

impl fmt::Debug for Integrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Integrand::Indicator(t) => write!(f, "Indicator({t})"),
            Integrand::Function(_) => f.write_str("Function"),
        }
    }
}

impl Integrand {
    pub fn function<F: Fn(f64) -> f64 + Send + Sync + 'static>(h: F) -> Self {
        Integrand::Function(Arc::new(h))
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Integrand::Indicator(t) => {
                if s <= *t {
                    1.0
                } else {
                    0.0
                }
            }
            Integrand::Function(h) => h(s),
        }
    }
}

/// Default number of terms of the fractional-kernel series.
pub const FRACTIONAL_TERMS: usize = 100_000;

/// Quadratic error form on deterministic integrands, `Γ[∫h dB] = ε[h]`.
#[derive(Clone)]
pub enum ErrorKernel {
    /// `ε[h] = ∫ h²`.
    Ou,
    /// `ε[h] = ∫ α h²`.
    WeightedOu(RealFn),
    /// `ε[h] = ∫∫ (h(s) - h(u))² β(s) β(u) ds du` on the half line.
    Beta(RealFn),
    /// `ε[h] = ∫_0^1 (h^(q))²`, the square of a fractional derivative.
    Fractional { q: f64, truncation: usize },
}

impl fmt::Debug for ErrorKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorKernel::Ou => f.write_str("Ou"),
            ErrorKernel::WeightedOu(_) => f.write_str("WeightedOu"),
            ErrorKernel::Beta(_) => f.write_str("Beta"),
            ErrorKernel::Fractional { q, truncation } => write!(f, "Fractional(q={q}, terms={truncation})"),
        }
    }
}

impl ErrorKernel {
    pub fn weighted_ou<F: Fn(f64) -> f64 + Send + Sync + 'static>(alpha: F) -> Self {
        ErrorKernel::WeightedOu(Arc::new(alpha))
    }

    pub fn beta<F: Fn(f64) -> f64 + Send + Sync + 'static>(beta: F) -> Self {
        ErrorKernel::Beta(Arc::new(beta))
    }

    pub fn fractional(q: f64, truncation: usize) -> Result<Self> {
        if !(q > 0.0 && q < 0.5) {
            return input(format!("fractional order must lie in (0, 1/2), got {q}"));
        }
        if truncation == 0 {
            return input("fractional series needs at least one term");
        }
        Ok(ErrorKernel::Fractional { q, truncation })
    }

    /// Checks the weight functions on the grid: nonnegative, and for the
    /// β-kernel numerically integrable on the half line.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        match self {
            ErrorKernel::Ou => Ok(()),
            ErrorKernel::WeightedOu(a) => check_nonnegative(a, grid, "alpha"),
            ErrorKernel::Beta(b) => {
                check_nonnegative(b, grid, "beta")?;
                beta_total(b).map(|_| ())
            }
            ErrorKernel::Fractional { q, truncation } => Self::fractional(*q, *truncation).map(|_| ()),
        }
    }

    pub fn supports_sharp(&self) -> bool {
        matches!(self, ErrorKernel::Ou | ErrorKernel::WeightedOu(_))
    }
}

fn check_nonnegative(f: &RealFn, grid: &TimeGrid, name: &str) -> Result<()> {
    for &s in grid.times() {
        let v = f(s);
        if !(v >= 0.0 && v.is_finite()) {
            return input(format!("{name}({s}) = {v} must be finite and nonnegative"));
        }
    }
    Ok(())
}

const INDICATOR_PANELS: usize = 64;

fn beta_total(beta: &RealFn) -> Result<f64> {
    let (total, tail) = integrate_to_infinity(|s| beta(s), 0.0);
    if !total.is_finite() || tail.abs() > 1e-6 * total.abs().max(f64::MIN_POSITIVE) {
        return input("beta does not appear to be integrable on [0, inf)");
    }
    Ok(total)
}

fn beta_head(beta: &RealFn, t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        integrate(|s| beta(s), 0.0, t, INDICATOR_PANELS)
    }
}

/// Truncated fractional-kernel series with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: f64,
    pub error_bound: f64,
}

/// `Σ_{n≥1} 4 (1 - cos 2πnt) / (2πn)^{2(1-q)}`: the first `truncation`
/// terms summed directly, the non-oscillating remainder `Σ_{n>N} 4/(2πn)^p`
/// added by Euler-Maclaurin, and the oscillating remainder bounded by
/// summation by parts.
pub fn fractional_series(q: f64, t: f64, truncation: usize) -> Result<SeriesValue> {
    ErrorKernel::fractional(q, truncation)?;
    if !(0.0..=1.0).contains(&t) {
        return input(format!("fractional kernel needs t in [0, 1], got {t}"));
    }
    if t == 0.0 || t == 1.0 {
        return Ok(SeriesValue { value: 0.0, error_bound: 0.0 });
    }
    let p = 2.0 * (1.0 - q);
    let two_pi = 2.0 * std::f64::consts::PI;
    let c = 4.0 / two_pi.powf(p);
    let mut sum = 0.0;
    for n in (1..=truncation).rev() {
        let nf = n as f64;
        sum += (1.0 - (two_pi * nf * t).cos()) * nf.powf(-p);
    }
    let nf = truncation as f64;
    let tail = nf.powf(1.0 - p) / (p - 1.0) - 0.5 * nf.powf(-p) + p / 12.0 * nf.powf(-p - 1.0)
        - p * (p + 1.0) * (p + 2.0) / 720.0 * nf.powf(-p - 3.0);
    let s = (std::f64::consts::PI * t).sin().abs();
    let osc = if s > 0.0 { nf.powf(-p) / s } else { 0.0 };
    Ok(SeriesValue { value: c * (sum + tail), error_bound: c * osc })
}

/// `Γ[∫h dB]` under `kernel`.
///
/// Indicator integrands use composite Gauss-Legendre (and the half-line
/// rule for β tails); general integrands use the trapezoid rule on `grid`.
pub fn gamma_wiener_integral(h: &Integrand, kernel: &ErrorKernel, grid: &TimeGrid) -> Result<f64> {
    gamma_wiener_cross(h, h, kernel, grid)
}

/// `Γ[∫h dB, ∫g dB]`.
pub fn gamma_wiener_cross(h: &Integrand, g: &Integrand, kernel: &ErrorKernel, grid: &TimeGrid) -> Result<f64> {
    kernel.validate(grid)?;
    match (h, g) {
        (Integrand::Indicator(s), Integrand::Indicator(t)) => {
            let (lo, hi) = (s.min(*t), s.max(*t));
            if lo < 0.0 {
                return input(format!("indicator times must be nonnegative, got {lo}"));
            }
            match kernel {
                ErrorKernel::Ou => Ok(lo),
                ErrorKernel::WeightedOu(a) => {
                    Ok(if lo > 0.0 { integrate(|u| a(u), 0.0, lo, INDICATOR_PANELS) } else { 0.0 })
                }
                ErrorKernel::Beta(b) => {
                    let total = beta_total(b)?;
                    let head_lo = beta_head(b, lo);
                    let tail_hi = if hi == lo {
                        integrate_to_infinity(|u| b(u), hi).0
                    } else {
                        total - beta_head(b, hi)
                    };
                    Ok(2.0 * head_lo * tail_hi)
                }
                ErrorKernel::Fractional { q, truncation } => {
                    let f = |x: f64| fractional_series(*q, x, *truncation).map(|v| v.value);
                    if s == t {
                        f(*s)
                    } else {
                        Ok(0.5 * (f(*s)? + f(*t)? - f(hi - lo)?))
                    }
                }
            }
        }
        _ => match kernel {
            ErrorKernel::Ou => Ok(grid.trapezoid(|u| h.eval(u) * g.eval(u))),
            ErrorKernel::WeightedOu(a) => Ok(grid.trapezoid(|u| a(u) * h.eval(u) * g.eval(u))),
            ErrorKernel::Beta(b) => {
                // integrands vanish after the horizon
                let total = beta_total(b)?;
                let hg = grid.trapezoid(|u| h.eval(u) * g.eval(u) * b(u));
                let hb = grid.trapezoid(|u| h.eval(u) * b(u));
                let gb = grid.trapezoid(|u| g.eval(u) * b(u));
                Ok(2.0 * hg * total - 2.0 * hb * gb)
            }
            ErrorKernel::Fractional { .. } => {
                Err(Error::Capability("the fractional kernel is only available for indicator integrands".into()))
            }
        },
    }
}

/// Which normalization of the bias operator is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasConvention {
    /// Generator of the path perturbation: `A[B_t] = -B_t/2`. This is what
    /// the perturbation simulation measures.
    #[default]
    Generator,
    /// Tabulated normalization `A[B_t] = -B_t`.
    Table,
}

impl BiasConvention {
    pub fn kappa(self) -> f64 {
        match self {
            BiasConvention::Generator => 0.5,
            BiasConvention::Table => 1.0,
        }
    }

    /// `A[B_t]`.
    pub fn brownian(self, b_t: f64) -> f64 {
        -self.kappa() * b_t
    }
}

/// A sampled Brownian path and its independent companion.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    grid: Arc<TimeGrid>,
    db: Vec<f64>,
    db_hat: Vec<f64>,
    seed: u64,
    index: u64,
}

impl PathBundle {
    /// Builds a path from explicit increments.
    pub fn from_increments(grid: Arc<TimeGrid>, db: Vec<f64>, db_hat: Vec<f64>) -> Result<Self> {
        if db.len() != grid.steps() || db_hat.len() != grid.steps() {
            return input("increment vectors must have one entry per grid step");
        }
        Ok(Self { grid, db, db_hat, seed: 0, index: 0 })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn increments(&self) -> &[f64] {
        &self.db
    }

    pub fn companion_increments(&self) -> &[f64] {
        &self.db_hat
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// `B` at every grid point.
    pub fn values(&self) -> Vec<f64> {
        cumulative(&self.db)
    }

    /// `B̂` at every grid point.
    pub fn companion_values(&self) -> Vec<f64> {
        cumulative(&self.db_hat)
    }

    /// `B_t` for a grid time `t`.
    pub fn at(&self, t: f64) -> Result<f64> {
        let k = self.grid.index_of(t)?;
        Ok(self.db[..k].iter().sum())
    }

    pub fn companion_at(&self, t: f64) -> Result<f64> {
        let k = self.grid.index_of(t)?;
        Ok(self.db_hat[..k].iter().sum())
    }

    /// Same path with the companion reflected, `B̂ -> -B̂`.
    pub fn mirrored(&self) -> Self {
        Self { db_hat: self.db_hat.iter().map(|v| -v).collect(), ..self.clone() }
    }

    /// Path on the grid keeping every `factor`-th point, increments summed.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.grid.steps() % factor != 0 {
            return input(format!("cannot coarsen {} steps by {factor}", self.grid.steps()));
        }
        let t: Vec<f64> = self.grid.times().iter().step_by(factor).copied().collect();
        let sum = |v: &[f64]| v.chunks(factor).map(|c| c.iter().sum()).collect::<Vec<f64>>();
        Ok(Self {
            grid: Arc::new(TimeGrid::new(t)?),
            db: sum(&self.db),
            db_hat: sum(&self.db_hat),
            seed: self.seed,
            index: self.index,
        })
    }
}

fn cumulative(d: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for v in d {
        acc += v;
        out.push(acc);
    }
    out
}

/// Path number `index` of the family addressed by `seed`.
pub fn sample_path(grid: &Arc<TimeGrid>, seed: u64, index: u64) -> PathBundle {
    let mut rng = substream(seed, Domain::Path, 0, index);
    let mut rng_hat = substream(seed, Domain::Companion, 0, index);
    let n = grid.steps();
    let mut db = Vec::with_capacity(n);
    let mut db_hat = Vec::with_capacity(n);
    for k in 0..n {
        let s = grid.dt(k).sqrt();
        db.push(s * normal(&mut rng));
        db_hat.push(s * normal(&mut rng_hat));
    }
    PathBundle { grid: Arc::clone(grid), db, db_hat, seed, index }
}

/// Paths `0..n_paths`; the result does not depend on the number of workers.
pub fn sample_paths(grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Vec<PathBundle>> {
    if n_paths == 0 {
        return input("n_paths must be at least 1");
    }
    let grid = Arc::new(grid.clone());
    Ok((0..n_paths as u64).into_par_iter().map(|i| sample_path(&grid, seed, i)).collect())
}

/// Perturbed path; the companion is carried over unchanged.
pub fn ou_perturb(path: &PathBundle, theta: f64) -> Result<PathBundle> {
    if !(theta >= 0.0) {
        return input(format!("theta must be nonnegative, got {theta}"));
    }
    if theta == 0.0 {
        return Ok(path.clone());
    }
    let a = (-theta).exp().sqrt();
    let b = (-(-theta).exp_m1()).sqrt();
    let db = path.db.iter().zip(&path.db_hat).map(|(x, y)| a * x + b * y).collect();
    Ok(PathBundle { db, ..path.clone() })
}

/// Left-point Riemann sum of `∫h dB`.
pub fn wiener_integral(h: &Integrand, path: &PathBundle) -> f64 {
    riemann(h, path.grid(), &path.db, |_| 1.0)
}

fn riemann(h: &Integrand, grid: &TimeGrid, d: &[f64], weight: impl Fn(f64) -> f64) -> f64 {
    match h {
        Integrand::Indicator(t) => {
            let tol = 1e-12 * grid.horizon();
            let times = grid.times();
            d.iter()
                .enumerate()
                .take_while(|(k, _)| times[k + 1] <= t + tol)
                .map(|(k, v)| weight(times[k]).sqrt() * v)
                .sum()
        }
        Integrand::Function(f) => {
            let times = grid.times();
            d.iter().enumerate().map(|(k, v)| weight(times[k]).sqrt() * f(times[k]) * v).sum()
        }
    }
}

/// `(∫h dB)^# = ∫ sqrt(α) h dB̂` on the companion path.
pub fn sharp_wiener_integral(h: &Integrand, path: &PathBundle, kernel: &ErrorKernel) -> Result<f64> {
    match kernel {
        ErrorKernel::Ou => Ok(riemann(h, path.grid(), &path.db_hat, |_| 1.0)),
        ErrorKernel::WeightedOu(a) => {
            check_nonnegative(a, path.grid(), "alpha")?;
            Ok(riemann(h, path.grid(), &path.db_hat, |s| a(s)))
        }
        _ => Err(Error::Capability(format!("no sharp derivative for the {kernel:?} kernel"))),
    }
}

/// Samples collected by [`perturbation_map`] for one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbed<'a> {
    pub original: &'a PathBundle,
    /// Perturbed with `+B̂`.
    pub up: &'a PathBundle,
    /// Perturbed with `-B̂`.
    pub down: &'a PathBundle,
}

/// Evaluates `f` on every path together with its two antithetic
/// perturbations. Paths are generated on the fly, so memory stays
/// proportional to the output.
pub fn perturbation_map<T, F>(grid: &TimeGrid, n_paths: usize, seed: u64, theta: f64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Perturbed<'_>) -> T + Sync,
{
    if n_paths == 0 {
        return input("n_paths must be at least 1");
    }
    if !(theta > 0.0) {
        return input(format!("theta must be positive, got {theta}"));
    }
    let grid = Arc::new(grid.clone());
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = sample_path(&grid, seed, i);
            let up = ou_perturb(&path, theta).expect("theta checked");
            let down = ou_perturb(&path.mirrored(), theta).expect("theta checked");
            f(Perturbed { original: &path, up: &up, down: &down })
        })
        .collect())
}

/// Per-path outcome of the brute-force perturbation of a functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSample {
    /// `(F(ω') - F(ω))² / θ` with the `+B̂` perturbation.
    pub squared: f64,
    /// `(ΔF₊ + ΔF₋) / (2θ)`, an estimate of the conditional mean shift.
    pub shift: f64,
}

/// [`perturbation_map`] specialised to a scalar functional.
pub fn perturbation_samples<F>(grid: &TimeGrid, n_paths: usize, seed: u64, theta: f64, f: F) -> Result<Vec<PerturbationSample>>
where
    F: Fn(&PathBundle) -> f64 + Sync,
{
    perturbation_map(grid, n_paths, seed, theta, |p| {
        let base = f(p.original);
        let up = f(p.up) - base;
        let down = f(p.down) - base;
        PerturbationSample { squared: up * up / theta, shift: 0.5 * (up + down) / theta }
    })
}

/// Heuristic Lipschitz screening: the largest difference quotient of `f`
/// over 1000 random pairs in `[lo, hi]`. Fails if it exceeds `bound`.
pub fn screen_lipschitz(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, bound: f64, seed: u64) -> Result<f64> {
    use rand::Rng;
    if !(lo < hi) {
        return input(format!("screening range [{lo}, {hi}] is empty"));
    }
    let mut rng = substream(seed, Domain::Screening, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = lo + (hi - lo) * rng.random::<f64>();
        let y = lo + (hi - lo) * rng.random::<f64>();
        if x == y {
            continue;
        }
        let q = ((f(x) - f(y)) / (x - y)).abs();
        if !q.is_finite() {
            return input(format!("payoff is not finite near {x} or {y}"));
        }
        worst = worst.max(q);
    }
    if worst > bound {
        return input(format!("payoff fails Lipschitz screening: quotient {worst:.6e} > bound {bound:.6e}"));
    }
    Ok(worst)
}

/// Functional whose Clark integrand `E[D U(t) | F_t]` is available.
#[derive(Clone)]
pub enum ClarkTarget {
    /// `U = B_T`.
    Terminal,
    /// `U = B_T²`.
    TerminalSquare,
    /// `U = f(S_T)` with `S_t = s0 exp(σ B_t + (r - σ²/2) t)`.
    Lognormal(LognormalTarget),
}

impl fmt::Debug for ClarkTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClarkTarget::Terminal => f.write_str("Terminal"),
            ClarkTarget::TerminalSquare => f.write_str("TerminalSquare"),
            ClarkTarget::Lognormal(l) => write!(f, "Lognormal(s0={}, sigma={}, r={})", l.s0, l.sigma, l.r),
        }
    }
}

/// Lipschitz payoff of a geometric Brownian motion.
#[derive(Clone)]
pub struct LognormalTarget {
    f: RealFn,
    f_prime: RealFn,
    s0: f64,
    sigma: f64,
    r: f64,
}

impl LognormalTarget {
    /// Screens `f` for the Lipschitz property on the range the price can
    /// reasonably reach over `horizon`.
    pub fn new(f: RealFn, f_prime: RealFn, s0: f64, sigma: f64, r: f64, horizon: f64, lipschitz_bound: f64) -> Result<Self> {
        if !(s0 > 0.0 && sigma > 0.0 && horizon > 0.0) {
            return input("lognormal target needs s0, sigma and the horizon positive");
        }
        let spread = 6.0 * sigma * horizon.sqrt() + r.abs() * horizon;
        screen_lipschitz(&*f, s0 * (-spread).exp(), s0 * spread.exp(), lipschitz_bound, 0)?;
        Ok(Self { f, f_prime, s0, sigma, r })
    }

    fn price(&self, t: f64, b: f64) -> f64 {
        self.s0 * (self.sigma * b + (self.r - 0.5 * self.sigma * self.sigma) * t).exp()
    }

    /// `E[g(S_T) | S_t = x]` by Gauss-Hermite quadrature.
    fn conditional(&self, g: impl Fn(f64) -> f64, x: f64, tau: f64) -> f64 {
        let rule = gauss_hermite_cached(64);
        let drift = (self.r - 0.5 * self.sigma * self.sigma) * tau;
        let vol = self.sigma * tau.sqrt();
        rule.nodes.iter().zip(&rule.weights).map(|(y, w)| w * g(x * (drift + vol * y).exp())).sum()
    }
}

impl ClarkTarget {
    /// `E[U]`.
    pub fn mean(&self, horizon: f64) -> f64 {
        match self {
            ClarkTarget::Terminal => 0.0,
            ClarkTarget::TerminalSquare => horizon,
            ClarkTarget::Lognormal(l) => l.conditional(|s| (l.f)(s), l.s0, horizon),
        }
    }

    /// `U` on the path.
    pub fn value(&self, path: &PathBundle) -> f64 {
        let grid = path.grid();
        let b_t: f64 = path.increments().iter().sum();
        match self {
            ClarkTarget::Terminal => b_t,
            ClarkTarget::TerminalSquare => b_t * b_t,
            ClarkTarget::Lognormal(l) => (l.f)(l.price(grid.horizon(), b_t)),
        }
    }
}

/// `t -> E[D U(t) | F_t]` at the left end of every grid step.
pub fn clark_integrand(target: &ClarkTarget, path: &PathBundle) -> Vec<f64> {
    let grid = path.grid();
    let horizon = grid.horizon();
    let b = path.values();
    grid.times()[..grid.steps()]
        .iter()
        .zip(&b)
        .map(|(&t, &b_t)| match target {
            ClarkTarget::Terminal => 1.0,
            ClarkTarget::TerminalSquare => 2.0 * b_t,
            ClarkTarget::Lognormal(l) => {
                let x = l.price(t, b_t);
                l.sigma * l.conditional(|s| (l.f_prime)(s) * s, x, horizon - t)
            }
        })
        .collect()
}

/// `E[U] + Σ φ(t_k) ΔB_k`, which converges to `U` as the grid is refined.
pub fn clark_reconstruction(target: &ClarkTarget, path: &PathBundle) -> f64 {
    let phi = clark_integrand(target, path);
    target.mean(path.grid().horizon()) + phi.iter().zip(path.increments()).map(|(p, d)| p * d).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normal_cdf;
    use crate::stats::Estimate;
    use proptest::prelude::*;

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
        let g = TimeGrid::uniform_with(1.0, 4, &[0.3, 0.5]).unwrap();
        assert_eq!(g.steps(), 5);
        assert_eq!(g.index_of(0.3).unwrap(), 2);
        assert!(g.index_of(0.31).is_err());
    }

    #[test]
    fn same_seed_same_paths() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        assert_eq!(sample_paths(&g, 50, 9).unwrap(), sample_paths(&g, 50, 9).unwrap());
        assert_ne!(sample_paths(&g, 5, 9).unwrap(), sample_paths(&g, 5, 10).unwrap());
        assert!(sample_paths(&g, 0, 1).is_err());
    }

    #[test]
    fn terminal_moments() {
        let g = TimeGrid::uniform(1.0, 100).unwrap();
        let n = 100_000;
        let grid = Arc::new(g);
        let ends: Vec<f64> = (0..n as u64).map(|i| sample_path(&grid, 3, i).increments().iter().sum()).collect();
        let e = Estimate::from_samples(&ends);
        assert!(e.mean.abs() < 4.0 / (n as f64).sqrt());
        let var = e.std_error * e.std_error * n as f64;
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn one_step_variance() {
        let g = Arc::new(TimeGrid::new(vec![0.0, 0.25]).unwrap());
        let xs: Vec<f64> = (0..20_000).map(|i| sample_path(&g, 1, i).increments()[0]).collect();
        let e = Estimate::from_samples(&xs);
        let var = e.std_error * e.std_error * 20_000.0;
        assert!((var - 0.25).abs() < 0.02);
    }

    #[test]
    fn perturbation_limits() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let p = &sample_paths(&g, 1, 2).unwrap()[0];
        assert_eq!(&ou_perturb(p, 0.0).unwrap(), p);
        let far = ou_perturb(p, 800.0).unwrap();
        assert_eq!(far.increments(), p.companion_increments());
        assert!(ou_perturb(p, -1.0).is_err());
    }

    #[test]
    fn ou_gamma_of_brownian_motion() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        assert_eq!(gamma_wiener_integral(&Integrand::Indicator(0.4), &ErrorKernel::Ou, &g).unwrap(), 0.4);
        let zero = ErrorKernel::weighted_ou(|_| 0.0);
        assert_eq!(gamma_wiener_integral(&Integrand::Indicator(0.4), &zero, &g).unwrap(), 0.0);
        let f = Integrand::function(|s| s);
        let fine = TimeGrid::uniform(1.0, 1000).unwrap();
        assert!((gamma_wiener_integral(&f, &ErrorKernel::Ou, &fine).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        let neg = ErrorKernel::weighted_ou(|s| s - 0.5);
        assert!(gamma_wiener_integral(&f, &neg, &g).is_err());
    }

    #[test]
    fn weighted_indicator() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let k = ErrorKernel::weighted_ou(|s| 2.0 * s);
        let v = gamma_wiener_integral(&Integrand::Indicator(0.5), &k, &g).unwrap();
        assert!((v - 0.25).abs() < 1e-14);
    }

    #[test]
    fn beta_kernel_exponential() {
        // β = e^-s: 2 (1 - e^-t) e^-t
        let g = TimeGrid::uniform(2.0, 10).unwrap();
        let k = ErrorKernel::beta(|s| (-s).exp());
        for t in [0.1, 0.7, 1.5] {
            let v = gamma_wiener_integral(&Integrand::Indicator(t), &k, &g).unwrap();
            let exact = 2.0 * (1.0 - (-t as f64).exp()) * (-t as f64).exp();
            assert!((v - exact).abs() < 1e-12 * exact, "{v} {exact}");
        }
        // cross value for s < t: 2 (1 - e^-s) e^-t
        let c = gamma_wiener_cross(&Integrand::Indicator(0.3), &Integrand::Indicator(0.9), &k, &g).unwrap();
        assert!((c - 2.0 * (1.0 - (-0.3f64).exp()) * (-0.9f64).exp()).abs() < 1e-12);
        let bad = ErrorKernel::beta(|s| 1.0 / (1.0 + s));
        assert!(gamma_wiener_integral(&Integrand::Indicator(0.5), &bad, &g).is_err());
    }

    #[test]
    fn beta_kernel_general_integrand_matches_indicator() {
        // a sharp ramp approximating 1_[0,t] tends to the indicator value
        let t = 0.5;
        let g = TimeGrid::uniform(1.0, 20_000).unwrap();
        let k = ErrorKernel::beta(|s| 1.0 / ((1.0 + s) * (1.0 + s)));
        let ind = gamma_wiener_integral(&Integrand::Indicator(t), &k, &g).unwrap();
        let ramp = gamma_wiener_integral(&Integrand::function(move |s| if s <= t { 1.0 } else { 0.0 }), &k, &g).unwrap();
        assert!((ind - ramp).abs() < 1e-4, "{ind} {ramp}");
    }

    #[test]
    fn fractional_series_converges() {
        let a = fractional_series(0.25, 0.5, 100_000).unwrap();
        let b = fractional_series(0.25, 0.5, 1_000_000).unwrap();
        assert!(((a.value - b.value) / b.value).abs() < 1e-6);
        assert!(a.error_bound < 1e-6 * a.value);
        assert!(fractional_series(0.25, 1.5, 10).is_err());
        assert!(ErrorKernel::fractional(0.6, 10).is_err());
        assert_eq!(fractional_series(0.25, 0.0, 1000).unwrap().value, 0.0);
    }

    #[test]
    fn fractional_needs_indicators() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let k = ErrorKernel::fractional(0.3, 1000).unwrap();
        let r = gamma_wiener_integral(&Integrand::function(|s| s), &k, &g);
        assert!(matches!(r, Err(Error::Capability(_))));
    }

    #[test]
    fn sharp_of_indicator_is_companion_value() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let p = &sample_paths(&g, 1, 4).unwrap()[0];
        let s = sharp_wiener_integral(&Integrand::Indicator(0.6), p, &ErrorKernel::Ou).unwrap();
        assert!((s - p.companion_at(0.6).unwrap()).abs() < 1e-15);
        assert_eq!(sharp_wiener_integral(&Integrand::function(|_| 0.0), p, &ErrorKernel::Ou).unwrap(), 0.0);
        let k = ErrorKernel::beta(|s| (-s).exp());
        assert!(matches!(sharp_wiener_integral(&Integrand::Indicator(0.5), p, &k), Err(Error::Capability(_))));
    }

    #[test]
    fn sharp_square_averages_to_gamma() {
        // one fixed base path, 10^4 companion draws
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let h = Integrand::function(|s| 1.0 + s);
        let k = ErrorKernel::weighted_ou(|s| 0.5 + s);
        let exact = gamma_wiener_integral(&h, &k, &g).unwrap();
        let sq: Vec<f64> = sample_paths(&g, 10_000, 5)
            .unwrap()
            .iter()
            .map(|p| sharp_wiener_integral(&h, p, &k).unwrap().powi(2))
            .collect();
        let e = Estimate::from_samples(&sq);
        // left-point sums integrate α h² with O(dt) error
        let disc = g.trapezoid(|s| (0.5 + s) * (1.0 + s) * (1.0 + s)) - exact;
        assert!(e.z_score(exact + disc).abs() < 3.0, "{} vs {exact}", e.mean);
    }

    #[test]
    fn perturbation_gamma_of_terminal_value() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let s = perturbation_samples(&g, 100_000, 11, 1e-3, |p| p.increments().iter().sum()).unwrap();
        let sq: Vec<f64> = s.iter().map(|x| x.squared).collect();
        let e = Estimate::from_samples(&sq);
        assert!(e.z_score(1.0).abs() < 3.0 || (e.mean - 1.0).abs() < 0.05e-3, "{e:?}");
    }

    #[test]
    fn perturbation_bias_of_square() {
        // A[B_t²] = 2 B_t A[B_t] + Γ[B_t] = -B_t² + t under the generator convention
        let t = 1.0;
        let g = TimeGrid::uniform(t, 1).unwrap();
        let samples = perturbation_map(&g, 50_000, 12, 1e-3, |p| {
            let b = p.original.increments()[0];
            let up = p.up.increments()[0];
            let down = p.down.increments()[0];
            let shift = 0.5 * (up * up + down * down - 2.0 * b * b) / 1e-3;
            (-b * b + t, shift)
        })
        .unwrap();
        let x: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let y: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let (slope, se) = crate::stats::ols_slope(&x, &y);
        assert!((slope - 1.0).abs() < 0.05 && se < 0.02, "{slope} ± {se}");
    }

    #[test]
    fn left_riemann_is_first_order() {
        let h = Integrand::function(|s| (3.0 * s).sin());
        let fine = TimeGrid::uniform(1.0, 1024).unwrap();
        let paths = sample_paths(&fine, 2000, 13).unwrap();
        let rms = |factor: usize| {
            let sq: Vec<f64> = paths
                .iter()
                .map(|p| {
                    let c = p.coarsen(factor).unwrap();
                    (wiener_integral(&h, &c) - wiener_integral(&h, p)).powi(2)
                })
                .collect();
            Estimate::from_samples(&sq).mean.sqrt()
        };
        let (e1, e2) = (rms(32), rms(16));
        let ratio = e1 / e2;
        assert!(ratio > 1.7 && ratio < 2.3, "ratio {ratio}");
    }

    #[test]
    fn clark_integrands_of_brownian_functionals() {
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let paths = sample_paths(&g, 200, 14).unwrap();
        for p in &paths[..3] {
            assert!(clark_integrand(&ClarkTarget::Terminal, p).iter().all(|v| *v == 1.0));
            let b = p.values();
            let phi = clark_integrand(&ClarkTarget::TerminalSquare, p);
            assert!(phi.iter().zip(&b).all(|(x, y)| *x == 2.0 * y));
        }
        let err: Vec<f64> = paths
            .iter()
            .map(|p| (clark_reconstruction(&ClarkTarget::TerminalSquare, p) - ClarkTarget::TerminalSquare.value(p)).powi(2))
            .collect();
        // E (Σ 2B_k ΔB_k + 1 - B_T²)² = Σ (ΔB_k²-dt)² moments: 2 Σ dt² = 2/400
        assert!(Estimate::from_samples(&err).mean < 3.0 * 2.0 / 400.0);
    }

    #[test]
    fn clark_reconstruction_lognormal() {
        let (s0, sigma, r, k) = (100.0, 0.2, 0.03, 100.0);
        let w = 5.0;
        let f: RealFn = Arc::new(move |x: f64| w * ((x - k) / w).exp().ln_1p());
        let fp: RealFn = Arc::new(move |x: f64| 1.0 / (1.0 + (-(x - k) / w).exp()));
        let target = ClarkTarget::Lognormal(LognormalTarget::new(f, fp, s0, sigma, r, 1.0, 2.0).unwrap());
        let err = |steps: usize| {
            let g = TimeGrid::uniform(1.0, steps).unwrap();
            let e: Vec<f64> = sample_paths(&g, 300, 15)
                .unwrap()
                .iter()
                .map(|p| (clark_reconstruction(&target, p) - target.value(p)).powi(2))
                .collect();
            Estimate::from_samples(&e).mean.sqrt()
        };
        let (coarse, fine) = (err(50), err(400));
        // strong error of the left-point sum decays like sqrt(dt)
        assert!(fine < 0.5 * coarse, "{coarse} {fine}");
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        let u: Vec<f64> = sample_paths(&g, 2000, 15).unwrap().iter().map(|p| target.value(p)).collect();
        let spread = Estimate::from_samples(&u).std_error * (2000f64).sqrt();
        assert!(fine < 0.05 * spread, "{fine} vs {spread}");
        // the mean is the undiscounted forward value of the softplus call
        let m = target.mean(1.0);
        let d1 = ((s0 / k).ln() + (r + 0.5 * sigma * sigma)) / sigma;
        let call = s0 * (r as f64).exp() * normal_cdf(d1) - k * normal_cdf(d1 - sigma);
        assert!(m > call && m < call + w);
    }

    #[test]
    fn lipschitz_screening_rejects_square_root() {
        let f: RealFn = Arc::new(|x: f64| x.abs().sqrt());
        let fp: RealFn = Arc::new(|x: f64| 0.5 / x.sqrt());
        assert!(LognormalTarget::new(f, fp, 1e-4, 0.2, 0.0, 1.0, 10.0).is_err());
        assert!(screen_lipschitz(&|x| 3.0 * x, 0.0, 1.0, 3.0 + 1e-9, 0).is_ok());
    }

    #[test]
    fn conditional_expectation_contracts_and_commutes_with_sharp() {
        // U = f(B_T): E[U|F_t] = g(t, B_t) with g_b = E[f'(B_T)|B_t]
        let (t, big_t) = (0.4, 1.0);
        let f1 = |x: f64| x.cos() + 0.3 * x;
        let gh = gauss_hermite_cached(64);
        let g_b = |b: f64| -> f64 {
            gh.nodes.iter().zip(&gh.weights).map(|(y, w)| w * f1(b + (big_t - t as f64).sqrt() * y)).sum()
        };
        let grid = TimeGrid::uniform_with(big_t, 10, &[t]).unwrap();
        let paths = sample_paths(&grid, 20_000, 16).unwrap();
        let mut chain = Vec::new();
        let mut sharp = Vec::new();
        let mut full = Vec::new();
        for p in &paths {
            let b_t = p.at(t).unwrap();
            let b_big = p.at(big_t).unwrap();
            chain.push(g_b(b_t).powi(2) * t);
            sharp.push((g_b(b_t) * p.companion_at(t).unwrap()).powi(2));
            full.push(f1(b_big).powi(2) * big_t);
        }
        let (c, s, u) = (Estimate::from_samples(&chain), Estimate::from_samples(&sharp), Estimate::from_samples(&full));
        let se = (c.std_error.powi(2) + s.std_error.powi(2)).sqrt();
        assert!((c.mean - s.mean).abs() < 3.0 * se, "{c:?} {s:?}");
        assert!(c.mean <= u.mean);
    }

    #[test]
    fn bias_conventions() {
        assert_eq!(BiasConvention::default().brownian(2.0), -1.0);
        assert_eq!(BiasConvention::Table.brownian(2.0), -2.0);
    }

    proptest! {
        #[test]
        fn weighted_gamma_is_quadratic(c in -4.0f64..4.0, a in 0.0f64..3.0) {
            let g = TimeGrid::uniform(1.0, 16).unwrap();
            let k = ErrorKernel::weighted_ou(move |s| a + s);
            let one = gamma_wiener_integral(&Integrand::function(|s| s.cos()), &k, &g).unwrap();
            let scaled = gamma_wiener_integral(&Integrand::function(move |s| c * s.cos()), &k, &g).unwrap();
            prop_assert!((scaled - c * c * one).abs() <= 1e-12 * (1.0 + scaled.abs()));
            prop_assert!(one >= 0.0);
        }

        #[test]
        fn beta_cross_is_cauchy_schwarz(s in 0.01f64..2.0, t in 0.01f64..2.0) {
            let g = TimeGrid::uniform(2.0, 4).unwrap();
            let k = ErrorKernel::beta(|u| 1.0 / ((1.0 + u) * (1.0 + u)));
            let gs = gamma_wiener_integral(&Integrand::Indicator(s), &k, &g).unwrap();
            let gt = gamma_wiener_integral(&Integrand::Indicator(t), &k, &g).unwrap();
            let c = gamma_wiener_cross(&Integrand::Indicator(s), &Integrand::Indicator(t), &k, &g).unwrap();
            prop_assert!(c * c <= gs * gt * (1.0 + 1e-10));
        }

        #[test]
        fn paths_do_not_depend_on_batch(seed in 0u64..1000, i in 0u64..64) {
            let g = TimeGrid::uniform(1.0, 8).unwrap();
            let all = sample_paths(&g, 64, seed).unwrap();
            prop_assert_eq!(&all[i as usize], &sample_path(&Arc::new(g), seed, i));
        }
    }
}
