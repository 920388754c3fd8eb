//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! status 1 if any criterion fails. Oracles live here, independent of the
//! library code paths they check.

use std::f64::consts::PI;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use errcalc::black_scholes::{
    bias_table, greeks, limit_checks, neutral_portfolio, perturbation_bias_check, perturbation_variance_check,
    BsModel, Payoff, Quantity,
};
use errcalc::error_algebra::{propagate_gamma, triangle_errors, triangle_errors_by_propagation, ErrorVector, SmoothMap};
use errcalc::level_vol::{nested_estimates, HedgeGammaForm, LocalVolModel, NestedBudget, RateCurve, VolSpec};
use errcalc::mc_ibp::{ibp_check, weight_check, DiscreteScheme, Param, SchemeVol, Xi};
use errcalc::stats::Estimate;
use errcalc::wiener::{BiasConvention, ErrorKernel, TimeGrid, FRACTIONAL_TERMS};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn bs_model() -> BsModel {
    BsModel::new(100.0, 0.2, 0.03, 1.0).unwrap()
}

fn smoothed_call() -> Payoff {
    Payoff::SoftplusCall { strike: 100.0, width: 2.0 }
}

// ---------------------------------------------------------------------------
// Second-order forward jets: value, gradient and full Hessian in up to four
// variables, used to differentiate random maps and their composites.
// ---------------------------------------------------------------------------

const D: usize = 4;

#[derive(Clone, Copy)]
struct Jet {
    v: f64,
    g: [f64; D],
    h: [[f64; D]; D],
}

impl Jet {
    fn constant(v: f64) -> Self {
        Self { v, g: [0.0; D], h: [[0.0; D]; D] }
    }

    fn variable(v: f64, i: usize) -> Self {
        let mut j = Self::constant(v);
        j.g[i] = 1.0;
        j
    }

    fn add(self, o: Jet) -> Jet {
        let mut r = self;
        r.v += o.v;
        for i in 0..D {
            r.g[i] += o.g[i];
            for k in 0..D {
                r.h[i][k] += o.h[i][k];
            }
        }
        r
    }

    fn scale(self, c: f64) -> Jet {
        let mut r = self;
        r.v *= c;
        for i in 0..D {
            r.g[i] *= c;
            for k in 0..D {
                r.h[i][k] *= c;
            }
        }
        r
    }

    fn mul(self, o: Jet) -> Jet {
        let mut r = Jet::constant(self.v * o.v);
        for i in 0..D {
            r.g[i] = self.v * o.g[i] + o.v * self.g[i];
            for k in 0..D {
                r.h[i][k] = self.v * o.h[i][k] + o.v * self.h[i][k] + self.g[i] * o.g[k] + o.g[i] * self.g[k];
            }
        }
        r
    }

    /// `φ(self)` given `(φ, φ', φ'')` at `self.v`.
    fn apply(self, (f0, f1, f2): (f64, f64, f64)) -> Jet {
        let mut r = Jet::constant(f0);
        for i in 0..D {
            r.g[i] = f1 * self.g[i];
            for k in 0..D {
                r.h[i][k] = f2 * self.g[i] * self.g[k] + f1 * self.h[i][k];
            }
        }
        r
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sin,
    Cos,
    Exp,
    Tanh,
    Ident,
    Square,
}

impl Unary {
    fn eval(self, x: f64) -> (f64, f64, f64) {
        match self {
            Unary::Sin => (x.sin(), x.cos(), -x.sin()),
            Unary::Cos => (x.cos(), -x.sin(), -x.cos()),
            Unary::Exp => {
                let e = (0.3 * x).exp();
                (e, 0.3 * e, 0.09 * e)
            }
            Unary::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                (t, s, -2.0 * t * s)
            }
            Unary::Ident => (x, 1.0, 0.0),
            Unary::Square => (x * x, 2.0 * x, 2.0),
        }
    }
}

/// `c · φ(w·x + b) · ψ(w'·x + b')`.
#[derive(Clone, Debug)]
struct Term {
    c: f64,
    factors: [(Unary, Vec<f64>, f64); 2],
}

#[derive(Clone, Debug)]
struct RandomMap {
    outputs: Vec<Vec<Term>>,
}

impl RandomMap {
    fn sample(rng: &mut ChaCha8Rng, dim_in: usize, dim_out: usize) -> Self {
        let ops = [Unary::Sin, Unary::Cos, Unary::Exp, Unary::Tanh, Unary::Ident, Unary::Square];
        let factor = |rng: &mut ChaCha8Rng| {
            let op = ops[rng.random_range(0..ops.len())];
            let w = (0..dim_in).map(|_| rng.random_range(-1.0..1.0)).collect();
            (op, w, rng.random_range(-0.5..0.5))
        };
        let outputs = (0..dim_out)
            .map(|_| {
                (0..3)
                    .map(|_| Term { c: rng.random_range(-1.5..1.5), factors: [factor(rng), factor(rng)] })
                    .collect()
            })
            .collect();
        Self { outputs }
    }

    fn eval_jets(&self, x: &[Jet]) -> Vec<Jet> {
        self.outputs
            .iter()
            .map(|terms| {
                terms.iter().fold(Jet::constant(0.0), |acc, t| {
                    let [a, b] = &t.factors;
                    let lin = |(op, w, c): &(Unary, Vec<f64>, f64)| {
                        let u = w.iter().zip(x).fold(Jet::constant(*c), |s, (wi, xi)| s.add(xi.scale(*wi)));
                        u.apply(op.eval(u.v))
                    };
                    acc.add(lin(a).mul(lin(b)).scale(t.c))
                })
            })
            .collect()
    }
}

fn seed_jets(x: &[f64]) -> Vec<Jet> {
    x.iter().enumerate().map(|(i, v)| Jet::variable(*v, i)).collect()
}

/// Wraps a jet evaluator `R^d -> R^k` as a map with exact derivatives.
fn jet_map(dim_in: usize, dim_out: usize, f: Arc<dyn Fn(&[Jet]) -> Vec<Jet> + Send + Sync>) -> SmoothMap {
    let (f1, f2, f3) = (f.clone(), f.clone(), f);
    SmoothMap::new(dim_in, dim_out, move |x| f1(&seed_jets(x)).iter().map(|j| j.v).collect())
        .with_jacobian(move |x| {
            let out = f2(&seed_jets(x));
            DMatrix::from_fn(dim_out, dim_in, |i, k| out[i].g[k])
        })
        .with_hessians(move |x| {
            f3(&seed_jets(x)).iter().map(|j| DMatrix::from_fn(dim_in, dim_in, |i, k| j.h[i][k])).collect()
        })
}

fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1e-300);
    (a - b).amax() / scale
}

fn criterion_gauss_coherence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20_241);
    let (mut worst_gamma, mut worst_bias) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (a, b, c) = (rng.random_range(1..=D), rng.random_range(1..=D), rng.random_range(1..=D));
        let g = Arc::new(RandomMap::sample(&mut rng, a, b));
        let f = Arc::new(RandomMap::sample(&mut rng, b, c));
        let (gm, fm) = (g.clone(), f.clone());
        let g_map = jet_map(a, b, Arc::new(move |x| gm.eval_jets(x)));
        let f_map = jet_map(b, c, Arc::new(move |x| fm.eval_jets(x)));
        let (gc, fc) = (g.clone(), f.clone());
        let direct = jet_map(a, c, Arc::new(move |x| fc.eval_jets(&gc.eval_jets(x))));
        let composed = f_map.compose(&g_map).unwrap();

        let values: Vec<f64> = (0..a).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = DMatrix::from_fn(a, a, |_, _| rng.random_range(-0.5..0.5));
        let bias: Vec<f64> = (0..a).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = ErrorVector::new(values, &l * l.transpose(), Some(bias)).unwrap();

        let chained = propagate_gamma(&f_map, &propagate_gamma(&g_map, &x).unwrap()).unwrap();
        for whole in [propagate_gamma(&direct, &x).unwrap(), propagate_gamma(&composed, &x).unwrap()] {
            worst_gamma = worst_gamma.max(max_rel(chained.gamma(), whole.gamma()));
            let (ba, bb): (&DVector<f64>, &DVector<f64>) = (chained.bias().unwrap(), whole.bias().unwrap());
            worst_bias = worst_bias.max((ba - bb).amax() / bb.amax().max(1e-300));
        }
    }
    Outcome::new(
        worst_gamma <= 1e-10 && worst_bias <= 1e-8,
        format!("100 pairs, worst relative gap gamma {worst_gamma:.2e} (tol 1e-10), bias {worst_bias:.2e} (tol 1e-8)"),
    )
}

fn criterion_triangle() -> Outcome {
    let grid = |a: f64, b: f64| (0..20).map(move |i| a + (b - a) * i as f64 / 19.0);
    let mut worst = 0.0f64;
    let mut points = 0usize;
    for l1 in grid(0.5, 3.0) {
        for l2 in grid(0.5, 3.0) {
            for t1 in grid(0.0, PI) {
                for t2 in grid(0.0, PI) {
                    let c = triangle_errors(l1, l2, t1, t2).unwrap();
                    let p = triangle_errors_by_propagation(l1, l2, t1, t2).unwrap();
                    let cs = [c.x_b, c.y_b, c.gamma_x, c.gamma_y, c.gamma_xy];
                    let ps = [p.x_b, p.y_b, p.gamma_x, p.gamma_y, p.gamma_xy];
                    // entries vanish at some angles, so the gap is taken relative to the point's scale
                    let scale = cs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    for (a, b) in cs.iter().zip(ps) {
                        worst = worst.max((a - b).abs() / scale);
                    }
                    points += 1;
                }
            }
        }
    }
    Outcome::new(worst <= 1e-12, format!("{points} points, worst relative gap {worst:.2e} (tol 1e-12)"))
}

fn criterion_perturbation_variance() -> Outcome {
    let (m, p) = (bs_model(), smoothed_call());
    let mut passed = true;
    let mut parts = Vec::new();
    for frac in [0.25, 0.5, 0.9] {
        let t = frac * m.maturity;
        let c = perturbation_variance_check(Quantity::Value, t, &m, &p, 200_000, 31, 1e-3, 0.01).unwrap();
        passed &= c.passed;
        parts.push(format!(
            "t={t}: empirical {:.5} predicted {:.5} gap {:.2e} tol {:.2e}",
            c.empirical.mean,
            c.predicted.mean,
            c.difference.mean.abs(),
            c.tolerance
        ));
    }
    Outcome::new(passed, parts.join("; "))
}

fn criterion_perturbation_bias() -> Outcome {
    let (m, p) = (bs_model(), smoothed_call());
    let check = perturbation_bias_check(Quantity::Price, 0.5, &m, &p, 200_000, 47, 1e-3, 0.05).unwrap();

    // tabulated chain: A[S] = κ(-SσB) + ½σ²St, A[V] = δA[S] + ½γΓ[S], A[H] = γA[S] + ½(∂³F)Γ[S]
    let mut worst = 0.0f64;
    for conv in [BiasConvention::Table, BiasConvention::Generator] {
        let kappa = match conv {
            BiasConvention::Table => 1.0,
            BiasConvention::Generator => 0.5,
        };
        for t in [0.1, 0.5, 0.9] {
            for b in [-1.2, 0.0, 0.4, 1.5] {
                let st = m.state(t, b);
                let s = st.s_t;
                let g = greeks(t, s, &m, &p).unwrap();
                let tab = bias_table(&st, &m, &p, conv).unwrap();
                let gs = s * s * m.sigma * m.sigma * t;
                let a_s = -kappa * s * m.sigma * b + 0.5 * m.sigma * m.sigma * s * t;
                let a_v = g.delta * a_s + 0.5 * g.gamma * gs;
                let a_h = g.gamma * a_s + 0.5 * g.speed * gs;
                let pairs = [
                    (tab.a_b, -kappa * b, 1.0),
                    (tab.gamma_s, gs, gs),
                    (tab.a_s, a_s, (kappa * s * m.sigma * b).abs() + 0.5 * m.sigma * m.sigma * s * t),
                    (tab.a_v, a_v, (g.delta * a_s).abs() + (0.5 * g.gamma * gs).abs()),
                    (tab.a_h.unwrap(), a_h, (g.gamma * a_s).abs() + (0.5 * g.speed * gs).abs()),
                ];
                for (got, want, scale) in pairs {
                    worst = worst.max((got - want).abs() / scale.max(1e-300));
                }
            }
        }
    }
    Outcome::new(
        check.passed && worst <= 1e-12,
        format!(
            "slope {:.4} ± {:.4} (tol 1 ± 0.05); bias table vs chain worst relative gap {worst:.2e} (tol 1e-12)",
            check.slope, check.slope_se
        ),
    )
}

fn criterion_limits() -> Outcome {
    let ks: Vec<u32> = (1..=8).collect();
    let rep = limit_checks(&bs_model(), &smoothed_call(), &ks, 1000, 53).unwrap();
    let last = rep.rows.last().unwrap();
    let hedge_last = last.hedge_gap.unwrap();
    let passed = rep.value_decreasing && last.value_gap < 1e-3 && rep.hedge_decreasing == Some(true) && hedge_last < 5e-3;
    let gaps: Vec<String> = rep.rows.iter().map(|r| format!("{:.2e}", r.value_gap)).collect();
    let hgaps: Vec<String> = rep.rows.iter().map(|r| format!("{:.2e}", r.hedge_gap.unwrap())).collect();
    Outcome::new(
        passed,
        format!(
            "value gaps [{}] decreasing={} final {:.2e} (tol 1e-3); hedge gaps [{}] decreasing={:?} final {hedge_last:.2e} (tol 5e-3); greek-only gap at k=8 {:.2e}",
            gaps.join(" "),
            rep.value_decreasing,
            last.value_gap,
            hgaps.join(" "),
            rep.hedge_decreasing,
            last.greek_gap
        ),
    )
}

fn criterion_level_vol_reduction() -> Outcome {
    let (sigma, r, t) = (0.2, 0.03, 0.5);
    let lv = LocalVolModel::new(100.0, VolSpec::Constant { sigma }, RateCurve::Constant { r }, 1.0).unwrap();
    let bs = BsModel::new(100.0, sigma, r, 1.0).unwrap();
    let payoff = smoothed_call();
    let grid = TimeGrid::uniform(1.0, 200).unwrap();
    let budget = NestedBudget::new(10_000, 1_000);
    let rep = nested_estimates(&lv, &payoff, &grid, t, &budget, 61, HedgeGammaForm::Printed).unwrap();
    let (mut dv, mut dh) = (Vec::new(), Vec::new());
    let (mut ref_v, mut ref_h) = (0.0, 0.0);
    let n = rep.rows.len() as f64;
    for row in &rep.rows {
        let g = greeks(t, row.x_t, &bs, &payoff).unwrap();
        let gx = row.x_t * row.x_t * sigma * sigma * t;
        dv.push(row.gamma_value - g.delta * g.delta * gx);
        dh.push(row.gamma_hedge.unwrap() - g.gamma * g.gamma * gx);
        ref_v += g.delta * g.delta * gx / n;
        ref_h += g.gamma * g.gamma * gx / n;
    }
    let (ev, eh) = (Estimate::from_samples(&dv), Estimate::from_samples(&dh));
    let ok_v = ev.mean.abs() <= 0.02 * ref_v + 3.0 * ev.std_error;
    let ok_h = eh.mean.abs() <= 0.02 * ref_h + 3.0 * eh.std_error;
    Outcome::new(
        ok_v && ok_h,
        format!(
            "value: nested {:.5} closed form {ref_v:.5} gap {:.2e} tol {:.2e}; hedge: nested {:.6e} closed form {ref_h:.6e} gap {:.2e} tol {:.2e}",
            rep.gamma_value.mean,
            ev.mean.abs(),
            0.02 * ref_v + 3.0 * ev.std_error,
            rep.gamma_hedge.unwrap().mean,
            eh.mean.abs(),
            0.02 * ref_h + 3.0 * eh.std_error
        ),
    )
}

fn criterion_ibp() -> Outcome {
    let f = |u: &[f64]| u[0];
    let partials = |_: &[f64]| vec![1.0];
    let c = ibp_check(&f, Some(&partials), &[1.0], 1_000_000, 71).unwrap();
    let sixth = 1.0 / 6.0;
    let identity_ok = (c.lhs.mean - sixth).abs() <= 3.0 * c.lhs.std_error
        && (c.rhs.mean - sixth).abs() <= 3.0 * c.rhs.std_error
        && c.within(3.0);

    let psi = |s: f64| (1.0 + (4.0 * (s - 1.0)).exp()).ln() / 4.0;
    let mut checked = 0;
    let mut failures = Vec::new();
    for n in [1usize, 3, 10] {
        for xi in [Xi::GaussianInverse, Xi::Logistic] {
            for vol in [SchemeVol::Constant(0.3), SchemeVol::Affine { a: 0.2, b: 0.1 }] {
                let spread = if xi == Xi::Logistic { 0.5 } else { 1.0 };
                let scheme = DiscreteScheme::new(n, 1.0, spread / (n as f64).sqrt(), vol.clone(), xi).unwrap();
                for param in [Param::X, Param::Lambda] {
                    let w = weight_check(&scheme, &psi, param, 200_000, 73 + checked as u64).unwrap();
                    checked += 1;
                    if !w.passed {
                        failures.push(format!(
                            "N={n} {xi:?} {vol:?} {param:?}: weight {:.5} fd {:.5} diff {:.2e} se {:.2e}",
                            w.weight.estimate.mean, w.fd.estimate.mean, w.difference.mean, w.difference.std_error
                        ));
                    }
                }
            }
        }
    }
    Outcome::new(
        identity_ok && failures.is_empty(),
        format!(
            "identity lhs {:.5} ± {:.1e}, rhs {:.5} ± {:.1e} (target 1/6); {}/{checked} weight checks within 3 sigma{}",
            c.lhs.mean,
            c.lhs.std_error,
            c.rhs.mean,
            c.rhs.std_error,
            checked - failures.len(),
            if failures.is_empty() { String::new() } else { format!(" [{}]", failures.join("; ")) }
        ),
    )
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn criterion_neutral_portfolio() -> Outcome {
    let m = bs_model();
    let strikes = [90.0, 100.0, 115.0];
    let payoffs: Vec<Payoff> = strikes.iter().map(|&k| Payoff::Call { strike: k }).collect();
    let np = neutral_portfolio(&payoffs, &m).unwrap();
    if np.basis.len() != 1 {
        return Outcome::new(false, format!("expected a one-dimensional neutral space, got {}", np.basis.len()));
    }
    let w = &np.basis[0];
    let (x, sigma, r, tau) = (m.s0, m.sigma, m.r, m.maturity);
    // vega and rho of each call from the lognormal closed form
    let (mut vega, mut rho) = (0.0, 0.0);
    for (wi, k) in w.iter().zip(strikes) {
        let s = sigma * tau.sqrt();
        let d1 = ((x / k).ln() + (r + 0.5 * sigma * sigma) * tau) / s;
        let d2 = d1 - s;
        vega += wi * x * (-0.5 * d1 * d1).exp() / (2.0 * PI).sqrt() * tau.sqrt();
        rho += wi * k * tau * (-r * tau).exp() * norm_cdf(d2);
    }
    // at t = 0 the volatility and rate errors reduce to (vega σ)² and (rho r)²
    let gamma_sigma = (vega * sigma).powi(2);
    let gamma_r = (rho * r).powi(2);
    let notional: f64 = w.iter().map(|v| v.abs() * x).sum();
    let tol = 1e-10 * notional * notional;
    Outcome::new(
        gamma_sigma < tol && gamma_r < tol,
        format!("weights {w:.6?}; Γ_σ {gamma_sigma:.2e}, Γ_r {gamma_r:.2e} (tol {tol:.2e})"),
    )
}

/// Hurwitz zeta `ζ(s, a)` for any real `s ≠ 1` by Euler-Maclaurin summation.
fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    const B2: [f64; 8] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
        -3617.0 / 510.0,
    ];
    let n = 30;
    let mut sum: f64 = (0..n).map(|k| (k as f64 + a).powf(-s)).sum();
    let big = n as f64 + a;
    sum += big.powf(1.0 - s) / (s - 1.0) + 0.5 * big.powf(-s);
    // B_{2j}/(2j)! · s(s+1)…(s+2j-2) · big^{-s-2j+1}
    let mut rising = s;
    let mut fact = 2.0;
    for (j, b) in B2.iter().enumerate() {
        let k = 2 * (j + 1);
        sum += b / fact * rising * big.powf(-s - k as f64 + 1.0);
        rising *= (s + k as f64 - 1.0) * (s + k as f64);
        fact *= ((k + 1) * (k + 2)) as f64;
    }
    sum
}

/// `Σ 4(1 - cos 2πnt)/(2πn)^p` through the Hurwitz functional equation.
fn fractional_oracle(q: f64, t: f64) -> f64 {
    let p = 2.0 * (1.0 - q);
    let cos_sum = (2.0 * PI).powf(p) / (4.0 * gamma(p) * (PI * p / 2.0).cos())
        * (hurwitz_zeta(1.0 - p, t) + hurwitz_zeta(1.0 - p, 1.0 - t));
    4.0 / (2.0 * PI).powf(p) * (hurwitz_zeta(p, 1.0) - cos_sum)
}

fn criterion_kernels() -> Outcome {
    let mut worst = 0.0f64;
    let b_t = 0.3;
    let betas: [(ErrorKernel, fn(f64) -> f64); 2] = [
        (ErrorKernel::beta(|s| (-s).exp()), |t| 2.0 * (-t as f64).exp() * (1.0 - (-t as f64).exp())),
        (ErrorKernel::beta(|s| (1.0 + s).powi(-2)), |t| 2.0 / (1.0 + t) * t / (1.0 + t)),
    ];
    for (kernel, oracle) in betas {
        let m = bs_model().with_kernel(kernel);
        for t in [0.1, 0.5, 0.9] {
            let st = m.state(t, b_t);
            let want = st.s_t * st.s_t * m.sigma * m.sigma * oracle(t);
            worst = worst.max((m.gamma_b_price(&st).unwrap() - want).abs() / want);
        }
    }
    let beta_worst = worst;
    worst = 0.0;
    for q in [0.1, 0.25, 0.4] {
        let m = bs_model().with_kernel(ErrorKernel::fractional(q, FRACTIONAL_TERMS).unwrap());
        for t in [0.1, 0.25, 0.5, 0.8] {
            let st = m.state(t, b_t);
            let want = st.s_t * st.s_t * m.sigma * m.sigma * fractional_oracle(q, t);
            worst = worst.max((m.gamma_b_price(&st).unwrap() - want).abs() / want);
        }
    }
    Outcome::new(
        beta_worst <= 1e-6 && worst <= 1e-6,
        format!("beta kernel worst relative gap {beta_worst:.2e}, fractional {worst:.2e} (tol 1e-6)"),
    )
}

const MODEL_JSON: &str = r#""model": {"s0": 100, "sigma": 0.2, "r": 0.03, "maturity": 1}"#;
const SOFTPLUS_JSON: &str = r#""payoff": {"kind": "softplus_call", "strike": 100, "width": 2}"#;

fn run_cli(args: &[&str], threads: &str) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_errcalc"))
        .args(args)
        .env("ERRCALC_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        ("price", format!(r#"{{{MODEL_JSON}, "payoff": {{"kind": "call", "strike": 100}}, "times": [0, 0.5], "spots": [90, 110]}}"#)),
        ("sens", format!(r#"{{{MODEL_JSON}, {SOFTPLUS_JSON}, "times": [0.25, 0.75], "paths": 2000, "seed": 5}}"#)),
        (
            "levelvol",
            format!(
                r#"{{"model": {{"x0": 100, "vol": {{"kind": "cev", "a": 2, "gamma": 0.5}}, "rate": {{"kind": "constant", "r": 0.03}}, "maturity": 1}},
                    {SOFTPLUS_JSON}, "times": [0.5], "paths": 200, "n_inner": 100, "steps": 20, "seed": 9}}"#
            ),
        ),
        (
            "ibp",
            r#"{"scheme": {"n_steps": 5, "x": 1, "lambda": 0.3, "vol": {"kind": "affine", "a": 0.2, "b": 0.1}},
                "psi": {"kind": "softplus_call", "strike": 1, "width": 0.2}, "paths": 20000, "seed": 3}"#
                .to_owned(),
        ),
        (
            "perturb-check",
            format!(r#"{{{MODEL_JSON}, {SOFTPLUS_JSON}, "times": [0.5], "quantities": ["price", "value", "hedge"], "bias": true, "paths": 5000}}"#),
        ),
        ("triangle", r#"{"l1": [1, 2, 3], "l2": [0.5, 1.5, 2], "theta1": [0, 3.14, 4], "theta2": [0.1, 1, 3]}"#.to_owned()),
    ];
    let mut compared = 0;
    for (cmd, json) in &configs {
        let path = dir.path().join(format!("{cmd}.json"));
        std::fs::write(&path, json).unwrap();
        let p = path.to_str().unwrap();
        for format in ["csv", "json"] {
            let args = [*cmd, "--config", p, "--format", format];
            let runs = (run_cli(&args, "1"), run_cli(&args, "4"), run_cli(&args, "3"));
            match runs {
                (Ok(a), Ok(b), Ok(c)) if a == b && b == c && !a.is_empty() => compared += 1,
                (Ok(_), Ok(_), Ok(_)) => {
                    return Outcome::new(false, format!("{cmd} --format {format}: reports differ across thread counts"))
                }
                (a, b, c) => {
                    let err = [a, b, c].into_iter().find_map(Result::err).unwrap();
                    return Outcome::new(false, err);
                }
            }
        }
    }
    Outcome::new(true, format!("{compared} command/format pairs byte-identical at 1, 3 and 4 threads"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gauss coherence of composed propagation", criterion_gauss_coherence),
        ("triangle closed form vs matrix propagation", criterion_triangle),
        ("perturbation variance of the value", criterion_perturbation_variance),
        ("perturbation bias of the price and bias table chain", criterion_perturbation_bias),
        ("limits of value and hedge errors at maturity", criterion_limits),
        ("constant-vol reduction of nested level-vol errors", criterion_level_vol_reduction),
        ("integration by parts identity and weights", criterion_ibp),
        ("vol/rate neutral portfolio of three calls", criterion_neutral_portfolio),
        ("beta and fractional kernel formulas", criterion_kernels),
        ("byte-identical reports across thread counts", criterion_determinism),
    ];
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        writeln!(
            stdout,
            "acceptance {:>2} {status} {name} [{:.1}s]: {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            outcome.detail
        )
        .unwrap();
        stdout.flush().unwrap();
        if !outcome.passed {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        writeln!(stdout, "acceptance: all 10 criteria passed").unwrap();
    } else {
        writeln!(stdout, "acceptance: failed criteria {failed:?}").unwrap();
        std::process::exit(1);
    }
}
