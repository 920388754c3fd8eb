//! Level-dependent volatility `dX = X σ(t, X) dB + r(t) X dt` and the
//! error calculus of its values and hedges.
//!
//! Along each path the simulation carries
//! `K = σ + X σ'_x`, `L = 2σ'_x + X σ''_x` and
//! `M_u = exp(∫K dB - ½∫K² ds + ∫r ds)`, so that `Γ[X_t] = M_t² ∫₀ᵗ X²σ²/M² ds`.
//! Conditional expectations given `F_t` are estimated by restarting inner
//! paths from `(t, X_t)`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::black_scholes::{Payoff, Smoothness};
use crate::error::{ensure_finite, input, Error, Result};
use crate::rng::{normal, substream, Domain};
use crate::stats::Estimate;
use crate::wiener::{sample_path, PathBundle, TimeGrid};

/// Paths leaving `x0·e^{±EXPLOSION_LOG_BOUND}` are abandoned.
pub const EXPLOSION_LOG_BOUND: f64 = 20.0;

/// Default ceiling on `n_outer · n_inner · steps`.
pub const DEFAULT_COST_CEILING: f64 = 2e10;

/// One term `a t^p x^q` of a polynomial volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolTerm {
    pub p: u32,
    pub q: u32,
    pub a: f64,
}

/// Local volatility `σ(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolSpec {
    Constant { sigma: f64 },
    /// `a x^{γ-1}`, so that `X σ(X) = a X^γ`.
    Cev { a: f64, gamma: f64 },
    /// `base + amp / (1 + (x/scale)²)`.
    Rational { base: f64, amp: f64, scale: f64 },
    /// `Σ a t^p x^q`.
    Polynomial { terms: Vec<VolTerm> },
}

impl VolSpec {
    /// `(σ, ∂σ/∂x, ∂²σ/∂x²)` at `(t, x)`.
    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> (f64, f64, f64) {
        match self {
            VolSpec::Constant { sigma } => (*sigma, 0.0, 0.0),
            VolSpec::Cev { a, gamma } => {
                let e = gamma - 1.0;
                let v = a * x.powf(e);
                (v, e * v / x, e * (e - 1.0) * v / (x * x))
            }
            VolSpec::Rational { base, amp, scale } => {
                let u = x / scale;
                let d = 1.0 + u * u;
                let v = base + amp / d;
                let d1 = -2.0 * amp * u / (scale * d * d);
                let d2 = amp * (6.0 * u * u - 2.0) / (scale * scale * d * d * d);
                (v, d1, d2)
            }
            VolSpec::Polynomial { terms } => {
                let mut out = (0.0, 0.0, 0.0);
                for VolTerm { p, q, a } in terms {
                    let c = a * t.powi(*p as i32);
                    let q = *q as i32;
                    out.0 += c * x.powi(q);
                    if q >= 1 {
                        out.1 += c * f64::from(q) * x.powi(q - 1);
                    }
                    if q >= 2 {
                        out.2 += c * f64::from(q * (q - 1)) * x.powi(q - 2);
                    }
                }
                out
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, VolSpec::Constant { .. })
    }
}

/// Deterministic short rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateCurve {
    Constant { r: f64 },
    /// `r0 + slope · t`.
    Linear { r0: f64, slope: f64 },
}

impl RateCurve {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            RateCurve::Constant { r } => *r,
            RateCurve::Linear { r0, slope } => r0 + slope * t,
        }
    }

    /// `∫_a^b r(s) ds`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            RateCurve::Constant { r } => r * (b - a),
            RateCurve::Linear { r0, slope } => r0 * (b - a) + 0.5 * slope * (b * b - a * a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolModel {
    pub x0: f64,
    pub vol: VolSpec,
    pub rate: RateCurve,
    pub maturity: f64,
}

impl LocalVolModel {
    /// Checks the inputs and samples `σ` and its derivatives on
    /// `x0·e^{[-5, 5]} × [0, T]`.
    pub fn new(x0: f64, vol: VolSpec, rate: RateCurve, maturity: f64) -> Result<Self> {
        if !(x0 > 0.0 && x0.is_finite()) {
            return input(format!("x0 must be positive, got {x0}"));
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return input(format!("maturity must be positive, got {maturity}"));
        }
        if !rate.at(0.0).is_finite() || !rate.at(maturity).is_finite() {
            return input("rate must be finite");
        }
        if let VolSpec::Rational { scale, .. } = vol {
            if !(scale > 0.0) {
                return input("rational volatility needs a positive scale");
            }
        }
        let model = Self { x0, vol, rate, maturity };
        for i in 0..=20 {
            let x = x0 * (-5.0 + 0.5 * f64::from(i)).exp();
            for j in 0..=10 {
                let t = maturity * f64::from(j) / 10.0;
                let (s, d1, d2) = model.vol.eval(t, x);
                if !(s.is_finite() && d1.is_finite() && d2.is_finite()) {
                    return input(format!("volatility is not finite at t={t}, x={x:e}"));
                }
            }
        }
        Ok(model)
    }

    fn discount(&self, t: f64) -> f64 {
        (-self.rate.integral(t, self.maturity)).exp()
    }

    fn in_range(&self, x: f64) -> bool {
        x.is_finite() && x > 0.0 && (x / self.x0).ln().abs() <= EXPLOSION_LOG_BOUND
    }
}

/// Per-path arrays on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPath {
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
    pub sigma: Vec<f64>,
    pub db: Vec<f64>,
    /// `∫₀^{t_j} X²σ²/M² ds` (left endpoints).
    pub integral: Vec<f64>,
    /// Grid index at which the explosion guard fired.
    pub exploded_at: Option<usize>,
}

impl AuxPath {
    /// `Γ[X_{t_j}] = M_j² ∫₀^{t_j} X²σ²/M²`.
    pub fn gamma_x(&self, j: usize) -> f64 {
        self.m[j] * self.m[j] * self.integral[j]
    }

    pub fn is_valid(&self) -> bool {
        self.exploded_at.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct AuxPaths {
    pub grid: Arc<TimeGrid>,
    pub paths: Vec<AuxPath>,
}

impl AuxPaths {
    pub fn exploded(&self) -> usize {
        self.paths.iter().filter(|p| !p.is_valid()).count()
    }
}

struct Step {
    x: f64,
    log_m: f64,
    sigma: f64,
    k: f64,
    l: f64,
}

/// One Euler step for `X` and one log-Euler step for `M` from `(t, x)`.
#[inline]
fn step(model: &LocalVolModel, t: f64, dt: f64, x: f64, log_m: f64, db: f64) -> Step {
    let (s, d1, d2) = model.vol.eval(t, x);
    let k = s + x * d1;
    let l = 2.0 * d1 + x * d2;
    let r = model.rate.at(t);
    Step {
        x: x + x * s * db + r * x * dt,
        log_m: log_m + k * db - 0.5 * k * k * dt + model.rate.integral(t, t + dt),
        sigma: s,
        k,
        l,
    }
}

fn aux_from_increments(model: &LocalVolModel, grid: &TimeGrid, db: Vec<f64>) -> AuxPath {
    let n = grid.steps();
    let times = grid.times();
    let mut path = AuxPath {
        x: Vec::with_capacity(n + 1),
        m: Vec::with_capacity(n + 1),
        k: Vec::with_capacity(n + 1),
        l: Vec::with_capacity(n + 1),
        sigma: Vec::with_capacity(n + 1),
        integral: Vec::with_capacity(n + 1),
        db,
        exploded_at: None,
    };
    let (mut x, mut log_m, mut integral) = (model.x0, 0.0f64, 0.0f64);
    for j in 0..=n {
        let t = times[j];
        let m = log_m.exp();
        path.x.push(x);
        path.m.push(m);
        path.integral.push(integral);
        let dt = if j < n { grid.dt(j) } else { 0.0 };
        let db = if j < n { path.db[j] } else { 0.0 };
        let s = step(model, t, dt, x, log_m, db);
        path.sigma.push(s.sigma);
        path.k.push(s.k);
        path.l.push(s.l);
        if j == n {
            break;
        }
        integral += (x * s.sigma / m).powi(2) * dt;
        x = s.x;
        log_m = s.log_m;
        if !model.in_range(x) {
            path.exploded_at = Some(j + 1);
            let fill = n - j;
            for v in [&mut path.x, &mut path.m, &mut path.integral, &mut path.sigma, &mut path.k, &mut path.l] {
                v.extend(std::iter::repeat_n(f64::NAN, fill));
            }
            break;
        }
    }
    path
}

/// Simulates `X`, `M`, `K`, `L` on `grid` from the Brownian paths of
/// [`sample_path`] with the same seed.
pub fn simulate_aux(model: &LocalVolModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<AuxPaths> {
    if n_paths == 0 {
        return input("n_paths must be at least 1");
    }
    let grid = Arc::new(grid.clone());
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| aux_from_increments(model, &grid, sample_path(&grid, seed, i).increments().to_vec()))
        .collect();
    Ok(AuxPaths { grid, paths })
}

/// `X`, `M`, `K`, `L` driven by the increments of one sampled path, for
/// instance a perturbed one.
pub fn aux_path(model: &LocalVolModel, path: &PathBundle) -> AuxPath {
    aux_from_increments(model, path.grid(), path.increments().to_vec())
}

/// Monte Carlo sizes of a nested estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedBudget {
    pub n_outer: usize,
    pub n_inner: usize,
    pub cost_ceiling: f64,
}

impl NestedBudget {
    pub fn new(n_outer: usize, n_inner: usize) -> Self {
        Self { n_outer, n_inner, cost_ceiling: DEFAULT_COST_CEILING }
    }

    /// Refuses budgets whose path-step count exceeds the ceiling.
    pub fn check(&self, steps: usize) -> Result<()> {
        if self.n_outer == 0 || self.n_inner < 2 {
            return input("nested Monte Carlo needs n_outer >= 1 and n_inner >= 2");
        }
        let estimated = self.n_outer as f64 * (self.n_inner as f64 + 1.0) * steps as f64;
        if estimated > self.cost_ceiling {
            return Err(Error::Budget { estimated, ceiling: self.cost_ceiling });
        }
        Ok(())
    }
}

/// Form of the `Z` process in the hedge error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeGammaForm {
    /// `Z = ∫_t^T L dB - ∫_t^T K L M ds`.
    #[default]
    Printed,
    /// `Z = ∫_t^T L M dB - ∫_t^T K L M ds`, from differentiating the first
    /// variation `M_T/M_t` in the initial point.
    FirstVariation,
}

/// Nested estimates on one outer path at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NestedRow {
    pub path: u64,
    pub x_t: f64,
    pub m_t: f64,
    /// `∫₀ᵗ X²σ²/M² ds`.
    pub integral: f64,
    pub value: f64,
    /// `H_t`.
    pub delta: f64,
    /// `Γ[V_t]` from two independent inner half-samples.
    pub gamma_value: f64,
    /// `delta_t² Γ[X_t]` with the full inner mean.
    pub gamma_value_plugin: f64,
    pub gamma: Option<f64>,
    pub gamma_hedge: Option<f64>,
    pub gamma_hedge_plugin: Option<f64>,
    pub inner_rejected: usize,
}

impl NestedRow {
    pub fn gamma_x(&self) -> f64 {
        self.m_t * self.m_t * self.integral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NestedReport {
    pub t: f64,
    pub rows: Vec<NestedRow>,
    pub value: Estimate,
    pub gamma_value: Estimate,
    pub gamma_hedge: Option<Estimate>,
    pub exploded_outer: usize,
    pub rejected_inner: usize,
}

fn inner_family(outer: u64, t_index: usize) -> u64 {
    (outer << 24) | t_index as u64
}

struct InnerSums {
    f: f64,
    w_v: [f64; 2],
    w_h: [f64; 2],
    count: [usize; 2],
    rejected: usize,
}

#[allow(clippy::too_many_arguments)]
fn inner_loop(
    model: &LocalVolModel,
    payoff: &Payoff,
    grid: &TimeGrid,
    j0: usize,
    x_t: f64,
    m_t: f64,
    n_inner: usize,
    seed: u64,
    family: u64,
    hedge: Option<HedgeGammaForm>,
) -> InnerSums {
    let times = grid.times();
    let n = grid.steps();
    let mut sums = InnerSums { f: 0.0, w_v: [0.0; 2], w_h: [0.0; 2], count: [0; 2], rejected: 0 };
    let half = n_inner / 2;
    'inner: for i in 0..n_inner {
        let mut rng = substream(seed, Domain::Inner, family, i as u64);
        let (mut x, mut log_m, mut z) = (x_t, 0.0f64, 0.0f64);
        for j in j0..n {
            let dt = grid.dt(j);
            let db = dt.sqrt() * normal(&mut rng);
            let s = step(model, times[j], dt, x, log_m, db);
            if let Some(form) = hedge {
                let m_abs = m_t * log_m.exp();
                let w = match form {
                    HedgeGammaForm::Printed => 1.0,
                    HedgeGammaForm::FirstVariation => m_abs,
                };
                z += s.l * w * db - s.k * s.l * m_abs * dt;
            }
            x = s.x;
            log_m = s.log_m;
            if !model.in_range(x) {
                sums.rejected += 1;
                continue 'inner;
            }
        }
        let m_tt = log_m.exp();
        let f1 = payoff.derivative(1, x).expect("first derivative");
        let slot = usize::from(i >= half);
        sums.f += payoff.value(x);
        sums.w_v[slot] += f1 * m_tt;
        sums.count[slot] += 1;
        if hedge.is_some() {
            let f2 = payoff.derivative(2, x).expect("second derivative checked");
            sums.w_h[slot] += m_tt * (f2 * m_t * m_tt + f1 * z);
        }
    }
    sums
}

fn mean_pair(sum: [f64; 2], count: [usize; 2]) -> Option<(f64, f64, f64)> {
    if count[0] == 0 || count[1] == 0 {
        return None;
    }
    let a = sum[0] / count[0] as f64;
    let b = sum[1] / count[1] as f64;
    Some((a, b, (sum[0] + sum[1]) / (count[0] + count[1]) as f64))
}

fn hedge_supported(payoff: &Payoff) -> bool {
    payoff.smoothness() >= Smoothness::C2Lip && payoff.max_order() >= 2
}

/// `V_t`, `H_t`, `Γ[V_t]` and (for payoffs with two derivatives) `Γ[H_t]`
/// on every outer path, at the grid time `t`.
#[allow(clippy::too_many_arguments)]
pub fn nested_estimates(
    model: &LocalVolModel,
    payoff: &Payoff,
    grid: &TimeGrid,
    t: f64,
    budget: &NestedBudget,
    seed: u64,
    form: HedgeGammaForm,
) -> Result<NestedReport> {
    if payoff.smoothness() < Smoothness::C1Lip {
        return input("the value error needs a C1 payoff; use a smoothed payoff");
    }
    payoff.validate()?;
    let j0 = grid.index_of(t)?;
    budget.check(grid.steps() - j0)?;
    let hedge = hedge_supported(payoff).then_some(form);
    let aux = simulate_aux(model, grid, budget.n_outer, seed)?;
    let disc = model.discount(t);
    let rows: Vec<Option<NestedRow>> = aux
        .paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.exploded_at.is_some_and(|e| e <= grid.steps()) {
                return None;
            }
            let (x_t, m_t, integral) = (p.x[j0], p.m[j0], p.integral[j0]);
            let fam = inner_family(i as u64, j0);
            let s = inner_loop(model, payoff, grid, j0, x_t, m_t, budget.n_inner, seed, fam, hedge);
            let (a, b, full) = mean_pair(s.w_v, s.count)?;
            let kept = (s.count[0] + s.count[1]) as f64;
            let delta = disc * full;
            let gamma_x = m_t * m_t * integral;
            let (gamma, gamma_hedge, gamma_hedge_plugin) = match hedge {
                Some(_) => {
                    let (ha, hb, hfull) = mean_pair(s.w_h, s.count)?;
                    let g = disc * hfull / m_t;
                    (Some(g), Some(disc * disc * ha * hb * integral), Some(g * g * gamma_x))
                }
                None => (None, None, None),
            };
            Some(NestedRow {
                path: i as u64,
                x_t,
                m_t,
                integral,
                value: disc * s.f / kept,
                delta,
                gamma_value: disc * disc * m_t * m_t * a * b * integral,
                gamma_value_plugin: delta * delta * gamma_x,
                gamma,
                gamma_hedge,
                gamma_hedge_plugin,
                inner_rejected: s.rejected,
            })
        })
        .collect();
    let exploded_outer = rows.iter().filter(|r| r.is_none()).count();
    let rows: Vec<NestedRow> = rows.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Error::Numeric("every outer path left the simulation range".into()));
    }
    let col = |f: &dyn Fn(&NestedRow) -> f64| Estimate::from_samples(&rows.iter().map(f).collect::<Vec<_>>());
    let value = col(&|r| r.value);
    let gamma_value = col(&|r| r.gamma_value);
    let gamma_hedge = hedge.map(|_| col(&|r| r.gamma_hedge.unwrap_or(f64::NAN)));
    ensure_finite(value.mean, "value estimate")?;
    ensure_finite(gamma_value.mean, "value error estimate")?;
    Ok(NestedReport {
        t,
        rejected_inner: rows.iter().map(|r| r.inner_rejected).sum(),
        rows,
        value,
        gamma_value,
        gamma_hedge,
        exploded_outer,
    })
}

/// Inner estimates restarted from `(t, x_t)` with `M_t = m_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionalEstimate {
    pub value: f64,
    pub delta: f64,
    pub gamma: Option<f64>,
    pub rejected: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn conditional_estimate(
    model: &LocalVolModel,
    payoff: &Payoff,
    grid: &TimeGrid,
    t: f64,
    x_t: f64,
    m_t: f64,
    n_inner: usize,
    seed: u64,
    form: HedgeGammaForm,
) -> Result<ConditionalEstimate> {
    if !(x_t > 0.0 && m_t > 0.0) {
        return input("restart point needs positive x_t and m_t");
    }
    if n_inner < 2 {
        return input("n_inner must be at least 2");
    }
    let j0 = grid.index_of(t)?;
    let hedge = hedge_supported(payoff).then_some(form);
    let s = inner_loop(model, payoff, grid, j0, x_t, m_t, n_inner, seed, 0, hedge);
    let kept = (s.count[0] + s.count[1]) as f64;
    if kept == 0.0 {
        return Err(Error::Numeric("every inner path left the simulation range".into()));
    }
    let disc = model.discount(t);
    Ok(ConditionalEstimate {
        value: disc * s.f / kept,
        delta: disc * (s.w_v[0] + s.w_v[1]) / kept,
        gamma: hedge.map(|_| disc * (s.w_h[0] + s.w_h[1]) / kept / m_t),
        rejected: s.rejected,
    })
}

/// `(V_t, Γ[V_t])` per outer path.
pub fn value_and_gamma_v(
    model: &LocalVolModel,
    payoff: &Payoff,
    grid: &TimeGrid,
    t: f64,
    budget: &NestedBudget,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let rep = nested_estimates(model, payoff, grid, t, budget, seed, HedgeGammaForm::default())?;
    Ok(rep.rows.iter().map(|r| (r.value, r.gamma_value)).collect())
}

/// `(H_t, Γ[H_t])` per outer path.
#[allow(clippy::too_many_arguments)]
pub fn hedge_and_gamma_h(
    model: &LocalVolModel,
    payoff: &Payoff,
    grid: &TimeGrid,
    t: f64,
    budget: &NestedBudget,
    seed: u64,
    form: HedgeGammaForm,
) -> Result<Vec<(f64, f64)>> {
    if !hedge_supported(payoff) {
        return input("the hedge error needs a payoff with two Lipschitz derivatives");
    }
    let rep = nested_estimates(model, payoff, grid, t, budget, seed, form)?;
    Ok(rep.rows.iter().map(|r| (r.delta, r.gamma_hedge.expect("hedge supported"))).collect())
}

/// `Γ[V_s, V_t] = delta_s delta_t M_s M_t ∫₀^{s∧t} X²σ²/M²` from two reports
/// on the same outer paths.
pub fn gamma_v_cross(rs: &NestedReport, rt: &NestedReport) -> Result<Vec<f64>> {
    cross(rs, rt, |r| Some(r.delta))
}

/// `Γ[H_s, H_t]` with the plug-in gammas.
pub fn gamma_h_cross(rs: &NestedReport, rt: &NestedReport) -> Result<Vec<f64>> {
    cross(rs, rt, |r| r.gamma)
}

fn cross(rs: &NestedReport, rt: &NestedReport, factor: impl Fn(&NestedRow) -> Option<f64>) -> Result<Vec<f64>> {
    let early = if rs.t <= rt.t { rs } else { rt };
    let mut out = Vec::with_capacity(rs.rows.len());
    let (mut i, mut j) = (0, 0);
    while i < rs.rows.len() && j < rt.rows.len() {
        let (a, b) = (&rs.rows[i], &rt.rows[j]);
        match a.path.cmp(&b.path) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let e = if std::ptr::eq(early, rs) { a } else { b };
                let (fa, fb) = factor(a)
                    .zip(factor(b))
                    .ok_or_else(|| Error::Capability("the report carries no hedge gammas".into()))?;
                out.push(fa * fb * a.m_t * b.m_t * e.integral);
                i += 1;
                j += 1;
            }
        }
    }
    Ok(out)
}

/// `Γ[X_t] = M_t² Σ (∫₀ᵗ s^p X_s^{q+1}/M_s (dB_s - K_s ds))² a_pq²` on
/// frozen paths, for uncorrelated errors `Γ[a_pq] = a_pq²`.
pub fn functional_vol_gamma(aux: &AuxPaths, terms: &[VolTerm], t: f64) -> Result<Vec<f64>> {
    let j_end = aux.grid.index_of(t)?;
    let times = aux.grid.times();
    Ok(aux
        .paths
        .iter()
        .map(|p| {
            if p.exploded_at.is_some_and(|e| e <= j_end) {
                return f64::NAN;
            }
            let total: f64 = terms
                .iter()
                .map(|VolTerm { p: pp, q, a }| {
                    let integral: f64 = (0..j_end)
                        .map(|j| {
                            let w = times[j].powi(*pp as i32) * p.x[j].powi(*q as i32 + 1) / p.m[j];
                            w * (p.db[j] - p.k[j] * aux.grid.dt(j))
                        })
                        .sum();
                    integral * integral * a * a
                })
                .sum();
            p.m[j_end] * p.m[j_end] * total
        })
        .collect())
}

/// Simulates a polynomial-volatility model and evaluates
/// [`functional_vol_gamma`].
pub fn functional_vol_sensitivity(
    model: &LocalVolModel,
    t: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let VolSpec::Polynomial { terms } = &model.vol else {
        return input("functional volatility sensitivity needs a polynomial volatility");
    };
    let aux = simulate_aux(model, grid, n_paths, seed)?;
    functional_vol_gamma(&aux, terms, t)
}
