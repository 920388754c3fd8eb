//! One function per subcommand, each turning a configuration into rows.

use errcalc::black_scholes::{
    bias_table, gamma_hedge, gamma_value, greeks, greeks_quadrature, perturbation_bias_check,
    perturbation_variance_check, BsModel, BsState, Payoff, Quantity, Smoothness, Source,
};
use errcalc::error_algebra::{triangle_errors, triangle_errors_by_propagation};
use errcalc::level_vol::{functional_vol_gamma, nested_estimates, simulate_aux, NestedBudget, VolSpec};
use errcalc::mc_ibp::{fd_derivative, ibp_check, weight_check, Param};
use errcalc::stats::Estimate;
use errcalc::wiener::{sample_paths, BiasConvention, ErrorKernel, TimeGrid};
use errcalc::Error;
use rayon::prelude::*;

use crate::config::{sweep, IbpConfig, LevelVolConfig, PerturbConfig, PriceConfig, SensConfig, TriangleConfig};
use crate::report::Row;
use crate::CliError;

type Rows = Result<Vec<Row>, CliError>;

fn se(e: &Estimate) -> Option<f64> {
    e.std_error.is_finite().then_some(e.std_error)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Estimate {
    Estimate::from_samples(&xs.into_iter().collect::<Vec<_>>())
}

pub fn price(cfg: &PriceConfig) -> Rows {
    let model = cfg.model.build()?;
    let payoff = cfg.payoff.build()?;
    let label = cfg.payoff.label();
    let mut rows = Vec::new();
    for &t in &cfg.times {
        for &x in &cfg.spots {
            let g = greeks(t, x, &model, &payoff)?;
            let q = if t < model.maturity { Some(greeks_quadrature(t, x, &model, &payoff)?) } else { None };
            let pick = |f: fn(&errcalc::black_scholes::GreekSet) -> f64| q.as_ref().map(f);
            for (name, v, reference) in [
                ("value", g.value, pick(|s| s.value)),
                ("delta", g.delta, pick(|s| s.delta)),
                ("gamma", g.gamma, pick(|s| s.gamma)),
                ("vega", g.vega, pick(|s| s.vega)),
                ("rho", g.rho, pick(|s| s.rho)),
                ("theta", g.theta, pick(|s| s.theta)),
                ("speed", g.speed, pick(|s| s.speed)),
            ] {
                rows.push(Row { t: Some(t), x: Some(x), value: Some(v), reference, ..Row::new(name, label.clone()) });
            }
        }
    }
    Ok(rows)
}

fn check_times(times: &[f64], maturity: f64) -> Result<(), CliError> {
    if times.is_empty() || times.iter().any(|t| !(*t >= 0.0 && *t <= maturity)) {
        return Err(CliError::Config(format!("times must be a nonempty list inside [0, {maturity}]")));
    }
    Ok(())
}

#[derive(Default, Clone, Copy)]
struct PathQuantities {
    value: f64,
    gamma: [Option<f64>; 4],
    bias: Option<f64>,
}

fn source_slot(s: Source) -> usize {
    match s {
        Source::B => 0,
        Source::S0 => 1,
        Source::Sigma => 2,
        Source::R => 3,
    }
}

fn per_source(
    sources: &[Source],
    f: impl Fn(Source) -> errcalc::Result<f64>,
) -> errcalc::Result<[Option<f64>; 4]> {
    let mut out = [None; 4];
    for &s in sources {
        out[source_slot(s)] = Some(f(s)?);
    }
    Ok(out)
}

fn sens_path(
    state: &BsState,
    model: &BsModel,
    payoff: &Payoff,
    sources: &[Source],
    hedge: bool,
) -> errcalc::Result<[PathQuantities; 3]> {
    let biases = if matches!(model.kernel, ErrorKernel::Ou) && model.switches.b {
        Some(bias_table(state, model, payoff, BiasConvention::Generator)?)
    } else {
        None
    };
    let g = greeks(state.t, state.s_t, model, payoff)?;
    let s = PathQuantities {
        value: state.s_t,
        gamma: per_source(sources, |src| model.gamma_price(state, src))?,
        bias: biases.map(|b| b.a_s),
    };
    let v = PathQuantities {
        value: g.value,
        gamma: per_source(sources, |src| gamma_value(state, model, payoff, src))?,
        bias: biases.map(|b| b.a_v),
    };
    let h = if hedge {
        let mut gamma = [None; 4];
        if sources.contains(&Source::B) {
            gamma[0] = Some(gamma_hedge(state, model, payoff)?);
        }
        PathQuantities { value: g.delta, gamma, bias: biases.and_then(|b| b.a_h) }
    } else {
        PathQuantities::default()
    };
    Ok([s, v, h])
}

fn aggregate(name: &str, label: &str, t: f64, qs: &[PathQuantities]) -> Row {
    let col = |k: usize| -> Option<f64> {
        qs[0].gamma[k].map(|_| mean(qs.iter().map(|q| q.gamma[k].unwrap_or(f64::NAN))).mean)
    };
    let total = mean(qs.iter().map(|q| q.gamma.iter().flatten().sum::<f64>()));
    let bias = qs[0].bias.map(|_| mean(qs.iter().map(|q| q.bias.unwrap_or(f64::NAN))).mean);
    Row {
        t: Some(t),
        value: Some(mean(qs.iter().map(|q| q.value)).mean),
        gamma_b: col(0),
        gamma_s0: col(1),
        gamma_sigma: col(2),
        gamma_r: col(3),
        bias,
        std_error: se(&total),
        ..Row::new(name, label)
    }
    .total()
}

pub fn sens(cfg: &SensConfig, n_paths: usize, seed: u64) -> Rows {
    let model = cfg.model.build()?;
    let payoff = cfg.payoff.build()?;
    check_times(&cfg.times, model.maturity)?;
    let hedge = payoff.smoothness() >= Smoothness::C2Lip && payoff.max_order() >= 2;
    let grid = TimeGrid::uniform_with(model.maturity, 1, &cfg.times)?;
    let paths = sample_paths(&grid, n_paths, seed)?;
    let label = cfg.payoff.label();
    let mut rows = Vec::new();
    for &t in &cfg.times {
        let per_path = paths
            .par_iter()
            .map(|p| sens_path(&model.state(t, p.at(t)?), &model, &payoff, &cfg.sources, hedge))
            .collect::<errcalc::Result<Vec<_>>>()?;
        let pick = |k: usize| per_path.iter().map(|q| q[k]).collect::<Vec<_>>();
        let mut s = aggregate("price", &label, t, &pick(0));
        if cfg.sources.contains(&Source::B) {
            // E[S_t²] σ² Γ[B_t]
            let second = model.s0 * model.s0 * ((2.0 * model.r + model.sigma * model.sigma) * t).exp();
            s.reference = Some(second * model.sigma * model.sigma * model.brownian_gamma(t)?);
        }
        rows.push(s);
        rows.push(aggregate("value", &label, t, &pick(1)));
        if hedge {
            rows.push(aggregate("hedge", &label, t, &pick(2)));
        }
    }
    Ok(rows)
}

pub fn levelvol(cfg: &LevelVolConfig, n_outer: usize, steps: usize, seed: u64) -> Rows {
    let model = cfg.model.build()?;
    let payoff = cfg.payoff.build()?;
    check_times(&cfg.times, model.maturity)?;
    let grid = TimeGrid::uniform_with(model.maturity, steps, &cfg.times)?;
    let mut budget = NestedBudget::new(n_outer, cfg.n_inner);
    if let Some(c) = cfg.cost_ceiling {
        budget.cost_ceiling = c;
    }
    let reference = match (&model.vol, &model.rate) {
        (VolSpec::Constant { sigma }, errcalc::level_vol::RateCurve::Constant { r }) => {
            Some(BsModel::new(model.x0, *sigma, *r, model.maturity)?)
        }
        _ => None,
    };
    let label = cfg.payoff.label();
    let mut rows = Vec::new();
    for &t in &cfg.times {
        let rep = nested_estimates(&model, &payoff, &grid, t, &budget, seed, cfg.hedge_form)?;
        let (mut ref_v, mut ref_h) = (None, None);
        if let Some(bs) = &reference {
            let g: Vec<(f64, f64, f64)> = rep
                .rows
                .par_iter()
                .map(|r| {
                    let g = greeks(t, r.x_t, bs, &payoff)?;
                    Ok((g.delta, g.gamma, r.x_t * r.x_t * bs.sigma * bs.sigma * t))
                })
                .collect::<errcalc::Result<_>>()?;
            ref_v = Some(mean(g.iter().map(|(d, _, gx)| d * d * gx)).mean);
            if rep.gamma_hedge.is_some() {
                ref_h = Some(mean(g.iter().map(|(_, gm, gx)| gm * gm * gx)).mean);
            }
        }
        let gx = mean(rep.rows.iter().map(|r| r.gamma_x()));
        rows.push(Row {
            t: Some(t),
            value: Some(mean(rep.rows.iter().map(|r| r.x_t)).mean),
            gamma_b: Some(gx.mean),
            std_error: se(&gx),
            ..Row::new("price", &label)
        }
        .total());
        rows.push(Row {
            t: Some(t),
            value: Some(rep.value.mean),
            gamma_b: Some(rep.gamma_value.mean),
            std_error: se(&rep.gamma_value),
            reference: ref_v,
            ..Row::new("value", &label)
        }
        .total());
        if let Some(gh) = rep.gamma_hedge {
            rows.push(Row {
                t: Some(t),
                value: Some(mean(rep.rows.iter().map(|r| r.delta)).mean),
                gamma_b: Some(gh.mean),
                std_error: se(&gh),
                reference: ref_h,
                ..Row::new("hedge", &label)
            }
            .total());
        }
        if let VolSpec::Polynomial { terms } = &model.vol {
            let aux = simulate_aux(&model, &grid, n_outer, seed)?;
            let g = functional_vol_gamma(&aux, terms, t)?;
            let e = mean(g.into_iter().filter(|v| v.is_finite()));
            rows.push(Row { t: Some(t), gamma_sigma: Some(e.mean), std_error: se(&e), ..Row::new("price_functional_vol", &label) }
                .total());
        }
        rows.push(Row {
            t: Some(t),
            value: Some(rep.exploded_outer as f64),
            reference: Some(rep.rejected_inner as f64),
            ..Row::new("diagnostic", "exploded_outer;rejected_inner")
        });
    }
    Ok(rows)
}

pub fn ibp(cfg: &IbpConfig, n_samples: usize, steps: usize, seed: u64) -> Rows {
    let scheme = cfg.scheme.build(steps)?;
    let psi_payoff = cfg.psi.build()?;
    let psi = move |s: f64| psi_payoff.value(s);
    let label = cfg.psi.label();
    let mut rows = Vec::new();
    for (name, p) in [("delta_weight", Param::X), ("lambda_weight", Param::Lambda)] {
        let c = weight_check(&scheme, &psi, p, n_samples, seed)?;
        let fd = fd_derivative(&scheme, &psi, p, None, n_samples, seed)?;
        rows.push(Row {
            value: Some(c.weight.estimate.mean),
            std_error: se(&c.difference),
            reference: Some(fd.estimate.mean),
            bias: Some(fd.half_step.mean - fd.estimate.mean),
            ..Row::new(name, if c.passed { "pass" } else { "fail" })
        });
    }
    let a = match &cfg.direction {
        Some(a) if a.len() == steps => a.clone(),
        Some(a) => return Err(CliError::Config(format!("direction has length {} but the scheme has {steps} steps", a.len()))),
        None => {
            let mut e = vec![0.0; steps];
            e[0] = 1.0;
            e
        }
    };
    let f = |u: &[f64]| psi(scheme.terminal(u));
    let c = ibp_check(&f, None, &a, n_samples, seed)?;
    rows.push(Row {
        value: Some(c.lhs.mean),
        reference: Some(c.rhs.mean),
        std_error: se(&c.difference),
        ..Row::new("ibp_identity", if c.within(3.0) { format!("pass;{label}") } else { format!("fail;{label}") })
    });
    Ok(rows)
}

pub fn perturb_check(cfg: &PerturbConfig, n_paths: usize, theta: f64, seed: u64) -> Rows {
    let model = cfg.model.build()?;
    let payoff = cfg.payoff.build()?;
    check_times(&cfg.times, model.maturity)?;
    let mut rows = Vec::new();
    let name = |q: Quantity| match q {
        Quantity::Price => "price",
        Quantity::Value => "value",
        Quantity::Hedge => "hedge",
    };
    for &q in &cfg.quantities {
        for &t in &cfg.times {
            let v = perturbation_variance_check(q, t, &model, &payoff, n_paths, seed, theta, cfg.rel_tol)?;
            rows.push(Row {
                t: Some(t),
                value: Some(v.empirical.mean),
                reference: Some(v.predicted.mean),
                std_error: se(&v.difference),
                gamma_b: Some(v.predicted.mean),
                ..Row::new(format!("{}_variance", name(q)), if v.passed { "pass" } else { "fail" })
            }
            .total());
            if cfg.bias {
                let b = perturbation_bias_check(q, t, &model, &payoff, n_paths, seed, theta, cfg.rel_tol)?;
                rows.push(Row {
                    t: Some(t),
                    value: Some(b.slope),
                    std_error: Some(b.slope_se),
                    reference: Some(1.0),
                    ..Row::new(format!("{}_bias_slope", name(q)), if b.passed { "pass" } else { "fail" })
                });
            }
        }
    }
    Ok(rows)
}

pub fn triangle(cfg: &TriangleConfig) -> Rows {
    let (l1s, l2s, t1s, t2s) = (sweep(cfg.l1), sweep(cfg.l2), sweep(cfg.theta1), sweep(cfg.theta2));
    let mut points = Vec::new();
    for &a in &l1s {
        for &b in &l2s {
            for &c in &t1s {
                for &d in &t2s {
                    points.push((a, b, c, d));
                }
            }
        }
    }
    let per_point = points
        .par_iter()
        .map(|&(a, b, c, d)| {
            let closed = triangle_errors(a, b, c, d)?;
            let prop = triangle_errors_by_propagation(a, b, c, d)?;
            let label = format!("{a:.16e};{b:.16e};{c:.16e};{d:.16e}");
            Ok([
                ("x_bias", closed.x_b, prop.x_b),
                ("y_bias", closed.y_b, prop.y_b),
                ("gamma_x", closed.gamma_x, prop.gamma_x),
                ("gamma_y", closed.gamma_y, prop.gamma_y),
                ("gamma_xy", closed.gamma_xy, prop.gamma_xy),
            ]
            .into_iter()
            .map(|(q, v, r)| Row { value: Some(v), reference: Some(r), ..Row::new(q, label.clone()) })
            .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(per_point.into_iter().flatten().collect())
}
