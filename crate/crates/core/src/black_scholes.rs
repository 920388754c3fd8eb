//! Black-Scholes pricing, Greeks and the error calculus on values and hedges.
//!
//! The price is `F(t, x) = e^{-rτ} E[f(x exp((r - σ²/2)τ + σ√τ Y))]`,
//! `Y ~ N(0,1)`, evaluated by quadrature in `Y`. Greeks are obtained by
//! differentiating under the integral: pathwise where the payoff supplies
//! derivatives, through Hermite likelihood-ratio weights otherwise.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::error_algebra::{propagate_bias, scalar_bias, ErrorVector, RealFn, SmoothMap};
use crate::numerics::{gauss_hermite_cached, normal_cdf, normal_nodes, normal_pdf, Break};
use crate::stats::{ols_slope, Estimate};
use crate::wiener::{
    gamma_wiener_cross, gamma_wiener_integral, perturbation_map, BiasConvention, ErrorKernel, Integrand, TimeGrid,
};

/// Declared regularity of a payoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Smoothness {
    Lipschitz,
    C1Lip,
    C2Lip,
}

/// User-supplied payoff with its derivatives.
#[derive(Clone)]
pub struct CustomPayoff {
    pub f: RealFn,
    pub d1: RealFn,
    pub d2: Option<RealFn>,
    pub d3: Option<RealFn>,
    /// Prices where `f` or a supplied derivative is not smooth.
    pub kinks: Vec<f64>,
    pub smoothness: Smoothness,
}

/// Piecewise linear payoff through `(xs[i], ys[i])`, continued linearly
/// with the end slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return input("a payoff table needs at least two (x, f(x)) points");
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) || xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return input("payoff table abscissae must be finite and strictly increasing");
        }
        Ok(Self { xs, ys })
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.partition_point(|v| *v <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    fn slope(&self, k: usize) -> f64 {
        (self.ys[k + 1] - self.ys[k]) / (self.xs[k + 1] - self.xs[k])
    }

    pub fn value(&self, x: f64) -> f64 {
        let k = self.segment(x);
        self.ys[k] + self.slope(k) * (x - self.xs[k])
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.slope(self.segment(x))
    }

    pub fn knots(&self) -> &[f64] {
        &self.xs
    }
}

/// European payoff `f(S_T)`.
#[derive(Clone)]
pub enum Payoff {
    Call { strike: f64 },
    Put { strike: f64 },
    /// `S_T - strike`.
    Forward { strike: f64 },
    Constant(f64),
    /// `w ln(1 + e^{(x-K)/w})`, a call smoothed on the price scale `w`.
    SoftplusCall { strike: f64, width: f64 },
    Table(PiecewiseLinear),
    /// `Σ c_k x^k`.
    Polynomial(Vec<f64>),
    Custom(CustomPayoff),
    Portfolio(Vec<(f64, Payoff)>),
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Call { strike } => write!(f, "Call({strike})"),
            Payoff::Put { strike } => write!(f, "Put({strike})"),
            Payoff::Forward { strike } => write!(f, "Forward({strike})"),
            Payoff::Constant(c) => write!(f, "Constant({c})"),
            Payoff::SoftplusCall { strike, width } => write!(f, "SoftplusCall({strike}, {width})"),
            Payoff::Table(t) => write!(f, "Table({} points)", t.xs.len()),
            Payoff::Polynomial(c) => write!(f, "Polynomial({c:?})"),
            Payoff::Custom(c) => write!(f, "Custom({:?})", c.smoothness),
            Payoff::Portfolio(p) => f.debug_list().entries(p.iter()).finish(),
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Derivatives available through this order are treated as infinite.
const ALL_ORDERS: usize = 3;

impl Payoff {
    pub fn custom(c: CustomPayoff) -> Self {
        Payoff::Custom(c)
    }

    /// Identity payoff `f(x) = x`.
    pub fn linear() -> Self {
        Payoff::Forward { strike: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Payoff::Call { strike } | Payoff::Put { strike } if !(*strike > 0.0 && strike.is_finite()) => {
                input(format!("strike must be positive, got {strike}"))
            }
            Payoff::SoftplusCall { strike, width } if !(*strike > 0.0 && *width > 0.0 && width.is_finite()) => {
                input(format!("softplus call needs positive strike and width, got {strike}, {width}"))
            }
            Payoff::Forward { strike } if !strike.is_finite() => input("forward strike must be finite"),
            Payoff::Constant(c) if !c.is_finite() => input("constant payoff must be finite"),
            Payoff::Polynomial(c) if c.is_empty() || c.iter().any(|v| !v.is_finite()) => {
                input("polynomial payoff needs finite coefficients")
            }
            Payoff::Portfolio(p) if p.is_empty() => input("a portfolio needs at least one payoff"),
            Payoff::Portfolio(p) => p.iter().try_for_each(|(w, q)| {
                if w.is_finite() {
                    q.validate()
                } else {
                    input("portfolio weights must be finite")
                }
            }),
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Payoff::Call { strike } => (x - strike).max(0.0),
            Payoff::Put { strike } => (strike - x).max(0.0),
            Payoff::Forward { strike } => x - strike,
            Payoff::Constant(c) => *c,
            Payoff::SoftplusCall { strike, width } => {
                let z = (x - strike) / width;
                width * (z.max(0.0) + (-z.abs()).exp().ln_1p())
            }
            Payoff::Table(t) => t.value(x),
            Payoff::Polynomial(c) => c.iter().rev().fold(0.0, |acc, a| acc * x + a),
            Payoff::Custom(c) => (c.f)(x),
            Payoff::Portfolio(p) => p.iter().map(|(w, q)| w * q.value(x)).sum(),
        }
    }

    /// Highest derivative order the payoff supplies (capped at 3).
    pub fn max_order(&self) -> usize {
        match self {
            Payoff::Call { .. } | Payoff::Put { .. } | Payoff::Table(_) => 1,
            Payoff::Forward { .. } | Payoff::Constant(_) | Payoff::SoftplusCall { .. } | Payoff::Polynomial(_) => {
                ALL_ORDERS
            }
            Payoff::Custom(c) => match (&c.d2, &c.d3) {
                (Some(_), Some(_)) => 3,
                (Some(_), None) => 2,
                _ => 1,
            },
            Payoff::Portfolio(p) => p.iter().map(|(_, q)| q.max_order()).min().unwrap_or(ALL_ORDERS),
        }
    }

    pub fn smoothness(&self) -> Smoothness {
        match self {
            Payoff::Call { .. } | Payoff::Put { .. } | Payoff::Table(_) => Smoothness::Lipschitz,
            Payoff::Forward { .. } | Payoff::Constant(_) | Payoff::SoftplusCall { .. } | Payoff::Polynomial(_) => {
                Smoothness::C2Lip
            }
            Payoff::Custom(c) => c.smoothness,
            Payoff::Portfolio(p) => p.iter().map(|(_, q)| q.smoothness()).min().unwrap_or(Smoothness::C2Lip),
        }
    }

    /// `f^{(order)}(x)` for `order <= max_order()`; first derivatives of
    /// kinked payoffs are taken from the right.
    pub fn derivative(&self, order: usize, x: f64) -> Option<f64> {
        if order == 0 {
            return Some(self.value(x));
        }
        if order > self.max_order() {
            return None;
        }
        Some(match self {
            Payoff::Call { strike } => f64::from(x >= *strike),
            Payoff::Put { strike } => -f64::from(x < *strike),
            Payoff::Forward { .. } => f64::from(order == 1),
            Payoff::Constant(_) => 0.0,
            Payoff::SoftplusCall { strike, width } => {
                let p = logistic((x - strike) / width);
                match order {
                    1 => p,
                    2 => p * (1.0 - p) / width,
                    _ => p * (1.0 - p) * (1.0 - 2.0 * p) / (width * width),
                }
            }
            Payoff::Table(t) => t.derivative(x),
            Payoff::Polynomial(c) => {
                let mut acc = 0.0;
                for (k, a) in c.iter().enumerate().skip(order).rev() {
                    let falling: f64 = (0..order).map(|i| (k - i) as f64).product();
                    acc = acc * x + a * falling;
                }
                acc
            }
            Payoff::Custom(c) => match order {
                1 => (c.d1)(x),
                2 => (c.d2.as_ref()?)(x),
                _ => (c.d3.as_ref()?)(x),
            },
            Payoff::Portfolio(p) => {
                let mut acc = 0.0;
                for (w, q) in p {
                    acc += w * q.derivative(order, x)?;
                }
                acc
            }
        })
    }

    /// Price levels with a kink (scale 0) or a sharp bend (positive scale).
    pub fn kinks(&self) -> Vec<(f64, f64)> {
        match self {
            Payoff::Call { strike } | Payoff::Put { strike } => vec![(*strike, 0.0)],
            Payoff::SoftplusCall { strike, width } => vec![(*strike, *width)],
            Payoff::Table(t) => t.xs.iter().map(|x| (*x, 0.0)).collect(),
            Payoff::Custom(c) => c.kinks.iter().map(|x| (*x, 0.0)).collect(),
            Payoff::Portfolio(p) => p.iter().flat_map(|(_, q)| q.kinks()).collect(),
            _ => Vec::new(),
        }
    }

    /// `(f, f')` as shared closures.
    pub fn as_functions(&self) -> (RealFn, RealFn) {
        let (a, b) = (self.clone(), self.clone());
        (Arc::new(move |x| a.value(x)), Arc::new(move |x| b.derivative(1, x).expect("first derivative")))
    }

    fn closed_form(&self) -> bool {
        matches!(self, Payoff::Call { .. } | Payoff::Put { .. } | Payoff::Forward { .. } | Payoff::Constant(_))
    }
}

/// Which error sources are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSwitches {
    pub b: bool,
    pub s0: bool,
    pub sigma: bool,
    pub r: bool,
}

impl Default for ErrorSwitches {
    fn default() -> Self {
        Self { b: true, s0: true, sigma: true, r: true }
    }
}

/// Error source on the Black-Scholes inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    B,
    S0,
    Sigma,
    R,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::B, Source::S0, Source::Sigma, Source::R];
}

/// Black-Scholes market with per-source error switches.
#[derive(Debug, Clone)]
pub struct BsModel {
    pub s0: f64,
    pub sigma: f64,
    pub r: f64,
    pub maturity: f64,
    pub kernel: ErrorKernel,
    pub switches: ErrorSwitches,
}

/// Point of a path: time, price and driving Brownian value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsState {
    pub t: f64,
    pub s_t: f64,
    pub b_t: f64,
}

impl BsModel {
    pub fn new(s0: f64, sigma: f64, r: f64, maturity: f64) -> Result<Self> {
        if !(s0 > 0.0 && s0.is_finite()) {
            return input(format!("s0 must be positive, got {s0}"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return input(format!("sigma must be positive, got {sigma}"));
        }
        if !r.is_finite() {
            return input("r must be finite");
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return input(format!("maturity must be positive and finite, got {maturity}"));
        }
        Ok(Self { s0, sigma, r, maturity, kernel: ErrorKernel::Ou, switches: ErrorSwitches::default() })
    }

    pub fn with_kernel(mut self, kernel: ErrorKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_switches(mut self, switches: ErrorSwitches) -> Self {
        self.switches = switches;
        self
    }

    /// `S_t = s0 exp(σ B_t + (r - σ²/2) t)`.
    pub fn state(&self, t: f64, b_t: f64) -> BsState {
        let s_t = self.s0 * (self.sigma * b_t + (self.r - 0.5 * self.sigma * self.sigma) * t).exp();
        BsState { t, s_t, b_t }
    }

    fn enabled(&self, source: Source) -> Result<()> {
        let on = match source {
            Source::B => self.switches.b,
            Source::S0 => self.switches.s0,
            Source::Sigma => self.switches.sigma,
            Source::R => self.switches.r,
        };
        if on {
            Ok(())
        } else {
            Err(Error::Capability(format!("error source {source:?} is disabled")))
        }
    }

    fn kernel_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.maturity, 64)
    }

    /// `Γ_B[B_s, B_t]` under the model's kernel.
    pub fn brownian_gamma_cross(&self, s: f64, t: f64) -> Result<f64> {
        gamma_wiener_cross(&Integrand::Indicator(s), &Integrand::Indicator(t), &self.kernel, &self.kernel_grid()?)
    }

    pub fn brownian_gamma(&self, t: f64) -> Result<f64> {
        gamma_wiener_integral(&Integrand::Indicator(t), &self.kernel, &self.kernel_grid()?)
    }

    /// `Γ_B[S_t] = S_t² σ² Γ_B[B_t]`.
    pub fn gamma_b_price(&self, state: &BsState) -> Result<f64> {
        self.enabled(Source::B)?;
        Ok(state.s_t * state.s_t * self.sigma * self.sigma * self.brownian_gamma(state.t)?)
    }

    pub fn gamma_b_price_cross(&self, s: &BsState, t: &BsState) -> Result<f64> {
        self.enabled(Source::B)?;
        Ok(s.s_t * t.s_t * self.sigma * self.sigma * self.brownian_gamma_cross(s.t, t.t)?)
    }

    /// Per-source `Γ[S_t]`: `S_t²σ²Γ[B_t]`, `S_t²`, `S_t²(B_t - σt)²σ²`, `(t S_t r)²`.
    pub fn gamma_price(&self, state: &BsState, source: Source) -> Result<f64> {
        self.enabled(source)?;
        let s = state.s_t;
        Ok(match source {
            Source::B => return self.gamma_b_price(state),
            Source::S0 => s * s,
            Source::Sigma => (s * (state.b_t - self.sigma * state.t) * self.sigma).powi(2),
            Source::R => (state.t * s * self.r).powi(2),
        })
    }
}

/// Price and sensitivities at `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreekSet {
    pub value: f64,
    pub delta: f64,
    pub gamma: f64,
    pub vega: f64,
    pub rho: f64,
    /// `∂F/∂t`.
    pub theta: f64,
    /// `∂³F/∂x³`.
    pub speed: f64,
}

impl GreekSet {
    /// `∂F/∂t + σ²x²F''/2 + r x F' - r F`.
    pub fn pde_residual(&self, x: f64, sigma: f64, r: f64) -> f64 {
        self.theta + 0.5 * sigma * sigma * x * x * self.gamma + r * x * self.delta - r * self.value
    }

    fn scaled(&self, a: f64) -> Self {
        Self {
            value: a * self.value,
            delta: a * self.delta,
            gamma: a * self.gamma,
            vega: a * self.vega,
            rho: a * self.rho,
            theta: a * self.theta,
            speed: a * self.speed,
        }
    }
}

fn check_point(t: f64, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return input(format!("price must be positive, got {x}"));
    }
    if !(t >= 0.0) {
        return input(format!("time must be nonnegative, got {t}"));
    }
    Ok(())
}

/// Lognormal transition over `tau` from `x`.
struct Transition {
    x: f64,
    sigma: f64,
    r: f64,
    s: f64,
    mu: f64,
    disc: f64,
}

impl Transition {
    fn new(x: f64, tau: f64, model: &BsModel) -> Self {
        let s = model.sigma * tau.sqrt();
        Self {
            x,
            sigma: model.sigma,
            r: model.r,
            s,
            mu: (model.r - 0.5 * model.sigma * model.sigma) * tau,
            disc: (-model.r * tau).exp(),
        }
    }

    fn terminal(&self, y: f64) -> f64 {
        self.x * (self.mu + self.s * y).exp()
    }

    fn breaks(&self, payoff: &Payoff) -> Vec<Break> {
        payoff
            .kinks()
            .into_iter()
            .filter(|(k, _)| *k > 0.0)
            .map(|(k, w)| Break { at: ((k / self.x).ln() - self.mu) / self.s, scale: w / (k * self.s) })
            .collect()
    }

    /// `D E[g_j(S_T) He_m(Y)] / s^m` for `m = 0..=max_m`, `g_j(u) = u^j f^{(j)}(u)`.
    fn moments_with(&self, payoff: &Payoff, j: usize, max_m: usize, nodes: &[(f64, f64)]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; max_m + 1];
        for &(y, w) in nodes {
            let st = self.terminal(y);
            let g = payoff.derivative(j, st).expect("order checked") * st.powi(j as i32);
            if !g.is_finite() {
                return input(format!("payoff is not integrable: f^({j}) is not finite at {st:e}"));
            }
            let (mut h0, mut h1) = (1.0, y);
            for (m, a) in acc.iter_mut().enumerate() {
                let he = match m {
                    0 => 1.0,
                    1 => y,
                    _ => {
                        let h2 = y * h1 - (m - 1) as f64 * h0;
                        h0 = h1;
                        h1 = h2;
                        h2
                    }
                };
                *a += w * g * he;
            }
        }
        Ok(acc.iter().enumerate().map(|(m, a)| self.disc * a / self.s.powi(m as i32)).collect())
    }

    fn moments(&self, payoff: &Payoff, j: usize, max_m: usize) -> Result<Vec<f64>> {
        let breaks = self.breaks(payoff);
        if !breaks.is_empty() {
            return self.moments_with(payoff, j, max_m, &normal_nodes(&breaks, 64));
        }
        let m64 = self.moments_with(payoff, j, max_m, &gh_nodes(64))?;
        let m128 = self.moments_with(payoff, j, max_m, &gh_nodes(128))?;
        let scale = m128.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let agree = m64.iter().zip(&m128).all(|(a, b)| (a - b).abs() <= 1e-10 * scale);
        Ok(if agree { m64 } else { m128 })
    }
}

fn gh_nodes(n: usize) -> Vec<(f64, f64)> {
    let rule = gauss_hermite_cached(n);
    rule.nodes.iter().copied().zip(rule.weights.iter().copied()).collect()
}

/// `F(t, x)`; at or after maturity the payoff itself.
pub fn price(t: f64, x: f64, model: &BsModel, payoff: &Payoff) -> Result<f64> {
    check_point(t, x)?;
    payoff.validate()?;
    let tau = model.maturity - t;
    if tau <= 0.0 {
        return Ok(payoff.value(x));
    }
    if payoff.closed_form() {
        return Ok(closed_form_greeks(tau, x, model, payoff).value);
    }
    price_quadrature(t, x, model, payoff)
}

/// [`price`] without the closed-form shortcut.
pub fn price_quadrature(t: f64, x: f64, model: &BsModel, payoff: &Payoff) -> Result<f64> {
    check_point(t, x)?;
    let tau = model.maturity - t;
    if tau <= 0.0 {
        return Ok(payoff.value(x));
    }
    Ok(Transition::new(x, tau, model).moments(payoff, 0, 0)?[0])
}

/// Price and Greeks at `(t, x)`.
pub fn greeks(t: f64, x: f64, model: &BsModel, payoff: &Payoff) -> Result<GreekSet> {
    check_point(t, x)?;
    payoff.validate()?;
    let tau = model.maturity - t;
    if tau <= 0.0 {
        return at_maturity(x, payoff);
    }
    if let Payoff::Portfolio(p) = payoff {
        if p.iter().all(|(_, q)| q.closed_form()) {
            return Ok(p.iter().fold(GreekSet::default_zero(), |acc, (w, q)| {
                acc.add(&closed_form_greeks(tau, x, model, q).scaled(*w))
            }));
        }
    }
    if payoff.closed_form() {
        return Ok(closed_form_greeks(tau, x, model, payoff));
    }
    greeks_quadrature(t, x, model, payoff)
}

impl GreekSet {
    fn default_zero() -> Self {
        Self { value: 0.0, delta: 0.0, gamma: 0.0, vega: 0.0, rho: 0.0, theta: 0.0, speed: 0.0 }
    }

    fn add(&self, o: &Self) -> Self {
        Self {
            value: self.value + o.value,
            delta: self.delta + o.delta,
            gamma: self.gamma + o.gamma,
            vega: self.vega + o.vega,
            rho: self.rho + o.rho,
            theta: self.theta + o.theta,
            speed: self.speed + o.speed,
        }
    }
}

fn at_maturity(x: f64, payoff: &Payoff) -> Result<GreekSet> {
    let d = |k: usize| {
        payoff
            .derivative(k, x)
            .ok_or_else(|| Error::Input(format!("payoff has no derivative of order {k} at maturity")))
    };
    Ok(GreekSet { value: d(0)?, delta: d(1)?, gamma: d(2)?, vega: 0.0, rho: 0.0, theta: 0.0, speed: d(3)? })
}

/// [`greeks`] by quadrature only (no closed-form shortcut).
pub fn greeks_quadrature(t: f64, x: f64, model: &BsModel, payoff: &Payoff) -> Result<GreekSet> {
    check_point(t, x)?;
    let tau = model.maturity - t;
    if tau <= 0.0 {
        return at_maturity(x, payoff);
    }
    let tr = Transition::new(x, tau, model);
    let order = payoff.max_order();
    let m0 = tr.moments(payoff, 0, 2)?;
    let m1 = tr.moments(payoff, 1, 2)?;
    // G_k = x^k ∂^k F, stepped up with G_{k+1} = (x∂x - k) G_k where the
    // payoff runs out of derivatives; x∂x raises the Hermite order by one.
    let g1 = m1[0];
    let g2 = if order >= 2 { tr.moments(payoff, 2, 0)?[0] } else { m1[1] - m1[0] };
    let g3 = match order {
        0 | 1 => m1[2] - 3.0 * m1[1] + 2.0 * m1[0],
        2 => {
            let m2 = tr.moments(payoff, 2, 1)?;
            m2[1] - 2.0 * m2[0]
        }
        _ => tr.moments(payoff, 3, 0)?[0],
    };
    let value = m0[0];
    let (s, sigma) = (tr.s, tr.sigma);
    let sqrt_tau = tau.sqrt();
    // likelihood-ratio weights of the lognormal density in σ, r and τ
    let vega = m0[2] * s * s / sigma - sqrt_tau * m0[1] * s;
    let rho = -tau * value + m0[1] * s * sqrt_tau / sigma;
    let dtau = -tr.r * value + (tr.r - 0.5 * sigma * sigma) * m0[1] + m0[2] * s * s / (2.0 * tau);
    let out = GreekSet {
        value,
        delta: g1 / x,
        gamma: g2 / (x * x),
        vega,
        rho,
        theta: -dtau,
        speed: g3 / (x * x * x),
    };
    for v in [out.value, out.delta, out.gamma, out.vega, out.rho, out.theta, out.speed] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite Greek at t={t}, x={x}")));
        }
    }
    Ok(out)
}

fn closed_form_greeks(tau: f64, x: f64, model: &BsModel, payoff: &Payoff) -> GreekSet {
    let (sigma, r) = (model.sigma, model.r);
    let disc = (-r * tau).exp();
    match payoff {
        Payoff::Constant(c) => GreekSet {
            value: c * disc,
            delta: 0.0,
            gamma: 0.0,
            vega: 0.0,
            rho: -tau * c * disc,
            theta: r * c * disc,
            speed: 0.0,
        },
        Payoff::Forward { strike } => GreekSet {
            value: x - strike * disc,
            delta: 1.0,
            gamma: 0.0,
            vega: 0.0,
            rho: tau * strike * disc,
            theta: -r * strike * disc,
            speed: 0.0,
        },
        Payoff::Call { strike } | Payoff::Put { strike } => {
            let s = sigma * tau.sqrt();
            let d1 = ((x / strike).ln() + (r + 0.5 * sigma * sigma) * tau) / s;
            let d2 = d1 - s;
            let pdf = normal_pdf(d1);
            let gamma = pdf / (x * s);
            let vega = x * pdf * tau.sqrt();
            let speed = -gamma / x * (d1 / s + 1.0);
            let decay = -x * pdf * sigma / (2.0 * tau.sqrt());
            if matches!(payoff, Payoff::Call { .. }) {
                GreekSet {
                    value: x * normal_cdf(d1) - strike * disc * normal_cdf(d2),
                    delta: normal_cdf(d1),
                    gamma,
                    vega,
                    rho: strike * tau * disc * normal_cdf(d2),
                    theta: decay - r * strike * disc * normal_cdf(d2),
                    speed,
                }
            } else {
                GreekSet {
                    value: strike * disc * normal_cdf(-d2) - x * normal_cdf(-d1),
                    delta: normal_cdf(d1) - 1.0,
                    gamma,
                    vega,
                    rho: -strike * tau * disc * normal_cdf(-d2),
                    theta: decay + r * strike * disc * normal_cdf(-d2),
                    speed,
                }
            }
        }
        _ => unreachable!("closed form requested for {payoff:?}"),
    }
}

/// `Γ_source[V_t]` on the path state.
pub fn gamma_value(state: &BsState, model: &BsModel, payoff: &Payoff, source: Source) -> Result<f64> {
    let f = value_factor(state, model, payoff, source)?;
    Ok(match source {
        Source::B => f * f * model.gamma_b_price(state)?,
        Source::S0 => f * f * model.s0 * model.s0,
        Source::Sigma => f * f * model.sigma * model.sigma,
        Source::R => f * f * model.r * model.r,
    })
}

/// `Γ_source[V_s, V_t]`.
pub fn gamma_value_cross(s: &BsState, t: &BsState, model: &BsModel, payoff: &Payoff, source: Source) -> Result<f64> {
    let fs = value_factor(s, model, payoff, source)?;
    let ft = value_factor(t, model, payoff, source)?;
    Ok(match source {
        Source::B => fs * ft * model.gamma_b_price_cross(s, t)?,
        Source::S0 => fs * ft * model.s0 * model.s0,
        Source::Sigma => fs * ft * model.sigma * model.sigma,
        Source::R => fs * ft * model.r * model.r,
    })
}

/// Derivative of `V_t` along each source (for `B`, the delta, which
/// multiplies `Γ_B[S_t]`).
fn value_factor(state: &BsState, model: &BsModel, payoff: &Payoff, source: Source) -> Result<f64> {
    model.enabled(source)?;
    if source == Source::Sigma && payoff.smoothness() < Smoothness::C1Lip {
        return input("the volatility error formula needs a C1 payoff; use a smoothed payoff");
    }
    let g = greeks(state.t, state.s_t, model, payoff)?;
    Ok(match source {
        Source::B => g.delta,
        Source::S0 => g.delta * state.s_t / model.s0,
        Source::Sigma => g.vega + state.s_t * (state.b_t - model.sigma * state.t) * g.delta,
        Source::R => state.t * state.s_t * g.delta + g.rho,
    })
}

fn require_c2(payoff: &Payoff, what: &str) -> Result<()> {
    if payoff.smoothness() < Smoothness::C2Lip || payoff.max_order() < 2 {
        return input(format!("{what} needs a payoff with two Lipschitz derivatives; use a smoothed payoff"));
    }
    Ok(())
}

/// `Γ_B[H_t] = gamma_t² Γ_B[S_t]`.
pub fn gamma_hedge(state: &BsState, model: &BsModel, payoff: &Payoff) -> Result<f64> {
    require_c2(payoff, "the hedge error")?;
    let g = greeks(state.t, state.s_t, model, payoff)?;
    Ok(g.gamma * g.gamma * model.gamma_b_price(state)?)
}

pub fn gamma_hedge_cross(s: &BsState, t: &BsState, model: &BsModel, payoff: &Payoff) -> Result<f64> {
    require_c2(payoff, "the hedge error")?;
    let gs = greeks(s.t, s.s_t, model, payoff)?;
    let gt = greeks(t.t, t.s_t, model, payoff)?;
    Ok(gs.gamma * gt.gamma * model.gamma_b_price_cross(s, t)?)
}

/// One row of [`limit_checks`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitRow {
    pub k: u32,
    pub t: f64,
    /// `Σ|Γ_B[V_t] - f'²(S_T)Γ_B[S_T]| / Σ f'²(S_T)Γ_B[S_T]`.
    pub value_gap: f64,
    /// Same with `Γ_B[H_t]` and `f''²`.
    pub hedge_gap: Option<f64>,
    /// `Σ|Γ_B[V_t] - f'²(S_T)Γ_B[S_t]| / Σ f'²(S_T)Γ_B[S_t]`: the gap due to
    /// the Greek alone, with the price error frozen at `t`.
    pub greek_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReport {
    pub rows: Vec<LimitRow>,
    pub value_decreasing: bool,
    pub hedge_decreasing: Option<bool>,
}

fn decreasing_in_aggregate(xs: &[f64]) -> bool {
    if xs.len() < 2 {
        return true;
    }
    let drops = xs.windows(2).filter(|w| w[1] <= w[0]).count();
    xs[xs.len() - 1] < xs[0] && 2 * drops >= xs.len() - 1
}

/// Aggregate gaps between `Γ_B[V_t]`, `Γ_B[H_t]` and their limits at
/// `t_k = T(1 - 2^{-k})`, over `n_paths` paths. Hedge gaps are reported
/// only for payoffs with two derivatives.
pub fn limit_checks(model: &BsModel, payoff: &Payoff, ks: &[u32], n_paths: usize, seed: u64) -> Result<LimitReport> {
    if ks.is_empty() || ks.windows(2).any(|w| w[1] <= w[0]) {
        return input("limit levels must be a nonempty increasing sequence");
    }
    let big_t = model.maturity;
    let times: Vec<f64> = ks.iter().map(|k| big_t * (1.0 - 0.5f64.powi(*k as i32))).collect();
    let grid = TimeGrid::uniform_with(big_t, 1, &times)?;
    let hedge = payoff.smoothness() >= Smoothness::C2Lip && payoff.max_order() >= 2;
    let paths = crate::wiener::sample_paths(&grid, n_paths, seed)?;
    let mut num_v = vec![0.0; ks.len()];
    let mut num_h = vec![0.0; ks.len()];
    let mut num_g = vec![0.0; ks.len()];
    let mut den_g = vec![0.0; ks.len()];
    let (mut den_v, mut den_h) = (0.0, 0.0);
    for p in &paths {
        let end = model.state(big_t, p.at(big_t)?);
        let gamma_end = model.gamma_b_price(&end)?;
        let f1 = payoff.derivative(1, end.s_t).expect("first derivative");
        den_v += f1 * f1 * gamma_end;
        let f2 = if hedge { payoff.derivative(2, end.s_t).unwrap_or(0.0) } else { 0.0 };
        den_h += f2 * f2 * gamma_end;
        for (i, &t) in times.iter().enumerate() {
            let st = model.state(t, p.at(t)?);
            let g = greeks(t, st.s_t, model, payoff)?;
            let gp = model.gamma_b_price(&st)?;
            num_v[i] += (g.delta * g.delta * gp - f1 * f1 * gamma_end).abs();
            num_g[i] += (g.delta * g.delta * gp - f1 * f1 * gp).abs();
            den_g[i] += f1 * f1 * gp;
            if hedge {
                num_h[i] += (g.gamma * g.gamma * gp - f2 * f2 * gamma_end).abs();
            }
        }
    }
    let ratio = |n: f64, d: f64| if d > 0.0 { n / d } else { n };
    let rows: Vec<LimitRow> = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| LimitRow {
            k,
            t: times[i],
            value_gap: ratio(num_v[i], den_v),
            hedge_gap: hedge.then(|| ratio(num_h[i], den_h)),
            greek_gap: ratio(num_g[i], den_g[i]),
        })
        .collect();
    let vg: Vec<f64> = rows.iter().map(|r| r.value_gap).collect();
    let hg: Vec<f64> = rows.iter().filter_map(|r| r.hedge_gap).collect();
    Ok(LimitReport {
        value_decreasing: decreasing_in_aggregate(&vg),
        hedge_decreasing: hedge.then(|| decreasing_in_aggregate(&hg)),
        rows,
    })
}

/// Weights insensitive at `t = 0` to the volatility and rate errors.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralPortfolio {
    /// Orthonormal basis of `{a : a·gamma₀ = 0, a·rho₀ = 0}`.
    pub basis: Vec<Vec<f64>>,
    pub rank: usize,
    pub diagnostic: Option<String>,
    pub gamma0: Vec<f64>,
    pub rho0: Vec<f64>,
}

/// Null space of the rows `(gamma₀ⁱ)` and `(rho₀ⁱ)`.
pub fn neutral_portfolio(payoffs: &[Payoff], model: &BsModel) -> Result<NeutralPortfolio> {
    let n = payoffs.len();
    if n < 3 {
        return input(format!("a neutral portfolio needs at least 3 payoffs, got {n}"));
    }
    let g: Vec<GreekSet> = payoffs.iter().map(|p| greeks(0.0, model.s0, model, p)).collect::<Result<_>>()?;
    let gamma0: Vec<f64> = g.iter().map(|x| x.gamma).collect();
    let rho0: Vec<f64> = g.iter().map(|x| x.rho).collect();
    let mut rows = Vec::new();
    for row in [&gamma0, &rho0] {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            rows.push(row.iter().map(|v| v / norm).collect::<Vec<f64>>());
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows.iter().map(|r| r[i] * r[j]).sum::<f64>());
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let tol = 1e-13 * eig.eigenvalues.max().max(1.0);
    let basis: Vec<Vec<f64>> = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] <= tol)
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let rank = n - basis.len();
    let diagnostic = (rank < 2).then(|| {
        format!("gamma and rho rows have rank {rank}; the neutral subspace has dimension {}", basis.len())
    });
    Ok(NeutralPortfolio { basis, rank, diagnostic, gamma0, rho0 })
}

/// Bias operator along a path, with the companion variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasTable {
    pub gamma_b: f64,
    pub gamma_s: f64,
    pub a_b: f64,
    pub a_s: f64,
    pub a_v: f64,
    pub a_h: Option<f64>,
}

/// `S_t` as a function of `B_t`, with exact derivatives.
pub fn price_map(model: &BsModel, t: f64) -> SmoothMap {
    let (m1, m2, m3) = (model.clone(), model.clone(), model.clone());
    SmoothMap::new(1, 1, move |b| vec![m1.state(t, b[0]).s_t])
        .with_jacobian(move |b| DMatrix::from_element(1, 1, m2.sigma * m2.state(t, b[0]).s_t))
        .with_hessians(move |b| vec![DMatrix::from_element(1, 1, m3.sigma * m3.sigma * m3.state(t, b[0]).s_t)])
}

/// `A[B_t]`, `A[S_t]`, `A[V_t]`, `A[H_t]` for the Brownian error under the
/// OU structure. `A[H_t]` needs a payoff with two derivatives.
pub fn bias_table(state: &BsState, model: &BsModel, payoff: &Payoff, convention: BiasConvention) -> Result<BiasTable> {
    model.enabled(Source::B)?;
    if !matches!(model.kernel, ErrorKernel::Ou) {
        return Err(Error::Capability("the bias table is available for the OU kernel only".into()));
    }
    let t = state.t;
    let a_b = convention.brownian(state.b_t);
    let b = ErrorVector::new(vec![state.b_t], DMatrix::from_element(1, 1, t), Some(vec![a_b]))?;
    let a_s = propagate_bias(&price_map(model, t), &b)?[0];
    let gamma_s = model.sigma * model.sigma * state.s_t * state.s_t * t;
    let g = greeks(t, state.s_t, model, payoff)?;
    let a_v = scalar_bias(g.delta, g.gamma, a_s, gamma_s);
    let a_h = if payoff.smoothness() >= Smoothness::C2Lip && payoff.max_order() >= 2 {
        Some(scalar_bias(g.gamma, g.speed, a_s, gamma_s))
    } else {
        None
    };
    Ok(BiasTable { gamma_b: t, gamma_s, a_b, a_s, a_v, a_h })
}

/// `A[S_t] = κ(-S_t σ B_t) + σ² S_t t / 2`, the tabulated closed form with
/// the first-order part scaled by the convention.
pub fn bias_price_closed_form(state: &BsState, model: &BsModel, convention: BiasConvention) -> f64 {
    -convention.kappa() * state.s_t * model.sigma * state.b_t + 0.5 * model.sigma * model.sigma * state.s_t * state.t
}

/// Outcome of a brute-force variance check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceCheck {
    /// Mean of `(ΔF)²/θ`.
    pub empirical: Estimate,
    /// Mean of the closed-form `Γ[F]` on the same paths.
    pub predicted: Estimate,
    /// Paired difference.
    pub difference: Estimate,
    pub tolerance: f64,
    pub passed: bool,
}

/// Outcome of a brute-force bias check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasCheck {
    pub slope: f64,
    pub slope_se: f64,
    pub passed: bool,
}

/// Quantity tracked by the perturbation checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Price,
    Value,
    Hedge,
}

fn quantity_at(q: Quantity, t: f64, b_t: f64, model: &BsModel, payoff: &Payoff) -> Result<f64> {
    let st = model.state(t, b_t);
    match q {
        Quantity::Price => Ok(st.s_t),
        Quantity::Value => price(t, st.s_t, model, payoff),
        Quantity::Hedge => Ok(greeks(t, st.s_t, model, payoff)?.delta),
    }
}

fn predicted_gamma(q: Quantity, state: &BsState, model: &BsModel, payoff: &Payoff) -> Result<f64> {
    match q {
        Quantity::Price => model.gamma_b_price(state),
        Quantity::Value => gamma_value(state, model, payoff, Source::B),
        Quantity::Hedge => gamma_hedge(state, model, payoff),
    }
}

fn predicted_bias(q: Quantity, state: &BsState, model: &BsModel, payoff: &Payoff, c: BiasConvention) -> Result<f64> {
    let table = bias_table(state, model, payoff, c)?;
    match q {
        Quantity::Price => Ok(table.a_s),
        Quantity::Value => Ok(table.a_v),
        Quantity::Hedge => table.a_h.ok_or_else(|| Error::Input("hedge bias needs a C2 payoff".into())),
    }
}

fn perturbation_grid(model: &BsModel, t: f64) -> Result<TimeGrid> {
    if !(t > 0.0 && t <= model.maturity) {
        return input(format!("check time must lie in (0, T], got {t}"));
    }
    TimeGrid::uniform_with(model.maturity, 1, &[t])
}

/// Mean of `(ΔQ_t)²/θ` under the OU path perturbation against the
/// closed-form `E Γ_B[Q_t]`; passes within `max(3 se, rel_tol · E Γ)`.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_variance_check(
    q: Quantity,
    t: f64,
    model: &BsModel,
    payoff: &Payoff,
    n_paths: usize,
    seed: u64,
    theta: f64,
    rel_tol: f64,
) -> Result<VarianceCheck> {
    if !matches!(model.kernel, ErrorKernel::Ou) {
        return Err(Error::Capability("the path perturbation realises the OU kernel only".into()));
    }
    let grid = perturbation_grid(model, t)?;
    let rows = perturbation_map(&grid, n_paths, seed, theta, |p| -> Result<(f64, f64)> {
        let b = p.original.at(t)?;
        let base = quantity_at(q, t, b, model, payoff)?;
        let up = quantity_at(q, t, p.up.at(t)?, model, payoff)?;
        let pred = predicted_gamma(q, &model.state(t, b), model, payoff)?;
        Ok(((up - base).powi(2) / theta, pred))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let emp: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (empirical, predicted, difference) =
        (Estimate::from_samples(&emp), Estimate::from_samples(&pred), Estimate::from_samples(&diff));
    let tolerance = (3.0 * difference.std_error).max(rel_tol * predicted.mean.abs());
    Ok(VarianceCheck { empirical, predicted, difference, tolerance, passed: difference.mean.abs() <= tolerance })
}

/// Regression of the antithetic shift `(ΔQ₊ + ΔQ₋)/(2θ)` on the predicted
/// `A[Q_t]`; passes if the slope is within `rel_tol` of one.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_bias_check(
    q: Quantity,
    t: f64,
    model: &BsModel,
    payoff: &Payoff,
    n_paths: usize,
    seed: u64,
    theta: f64,
    rel_tol: f64,
) -> Result<BiasCheck> {
    let grid = perturbation_grid(model, t)?;
    let rows = perturbation_map(&grid, n_paths, seed, theta, |p| -> Result<(f64, f64)> {
        let b = p.original.at(t)?;
        let base = quantity_at(q, t, b, model, payoff)?;
        let up = quantity_at(q, t, p.up.at(t)?, model, payoff)? - base;
        let down = quantity_at(q, t, p.down.at(t)?, model, payoff)? - base;
        let pred = predicted_bias(q, &model.state(t, b), model, payoff, BiasConvention::Generator)?;
        Ok((pred, 0.5 * (up + down) / theta))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (slope, slope_se) = ols_slope(&x, &y);
    Ok(BiasCheck { slope, slope_se, passed: (slope - 1.0).abs() <= rel_tol })
}
