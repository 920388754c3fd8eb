//! Quadrature rules, Gaussian expectations and finite differences.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, one Newton step on top of statrs' inverse.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let std = Normal::standard();
    let x = std.inverse_cdf(p);
    // refine on the side where the cdf difference keeps relative precision
    let x = if p < 0.5 {
        x - (normal_cdf(x) - p) / normal_pdf(x)
    } else {
        x + (normal_cdf(-x) - (1.0 - p)) / normal_pdf(x)
    };
    x
}

/// Nodes and weights of an interpolatory rule.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss-Hermite rule for the standard normal law (weights sum to one).
///
/// Nodes come from the Golub-Welsch eigenproblem and are polished by Newton
/// iterations on the orthonormal Hermite recurrence; weights are the
/// Christoffel numbers `1 / sum_k p_k(x)^2`.
pub fn gauss_hermite(n: usize) -> QuadRule {
    assert!(n >= 1);
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let orthonormal = |x: f64| -> (f64, f64, f64) {
        // returns (p_n, p_{n-1}, sum_{k<n} p_k^2)
        let mut prev = 0.0;
        let mut cur = 1.0;
        let mut sum = 0.0;
        for k in 0..n {
            sum += cur * cur;
            let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
            prev = cur;
            cur = next;
        }
        (cur, prev, sum)
    };
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (pn, pn1, _) = orthonormal(*x);
            let dpn = (n as f64).sqrt() * pn1;
            if dpn != 0.0 {
                *x -= pn / dpn;
            }
        }
        let (_, _, sum) = orthonormal(*x);
        weights.push(1.0 / sum);
    }
    QuadRule { nodes, weights }
}

pub fn gauss_hermite_cached(n: usize) -> &'static QuadRule {
    static GH64: OnceLock<QuadRule> = OnceLock::new();
    static GH128: OnceLock<QuadRule> = OnceLock::new();
    match n {
        64 => GH64.get_or_init(|| gauss_hermite(64)),
        128 => GH128.get_or_init(|| gauss_hermite(128)),
        _ => panic!("only 64 and 128 node Gauss-Hermite rules are cached"),
    }
}

/// Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> QuadRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * x * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (x * p0 - p1) / (x * x - 1.0);
            let dx = p0 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    QuadRule { nodes, weights }
}

fn gl12() -> &'static QuadRule {
    static GL: OnceLock<QuadRule> = OnceLock::new();
    GL.get_or_init(|| gauss_legendre(12))
}

/// Composite 12-point Gauss-Legendre on `[a, b]` with `panels` equal panels.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let rule = gl12();
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    total * 0.5 * h
}

const SUB_PANELS: usize = 8;

/// Integral over `[a, inf)` through `s = a + u/(1-u)` with panels graded
/// geometrically towards `u = 1` and truncated near `s = a + 2^48`. Returns `(value, contribution of the last
/// ten panels)`; the second number is a cheap integrability diagnostic.
pub fn integrate_to_infinity<F: Fn(f64) -> f64>(f: F, a: f64) -> (f64, f64) {
    let rule = gl12();
    let levels = 48;
    let mut total = 0.0;
    let mut tail = 0.0;
    let mut lo = 0.0;
    for level in 0..levels {
        let hi = 1.0 - 0.5f64.powi(level + 1);
        let h = (hi - lo) / SUB_PANELS as f64;
        let mut panel = 0.0;
        for k in 0..SUB_PANELS {
            let mid = lo + (k as f64 + 0.5) * h;
            let mut part = 0.0;
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                let u = mid + 0.5 * h * x;
                let one_minus = 1.0 - u;
                part += w * f(a + u / one_minus) / (one_minus * one_minus);
            }
            panel += 0.5 * h * part;
        }
        total += panel;
        if level >= levels - 10 {
            tail += panel;
        }
        lo = hi;
    }
    (total, tail)
}

/// A location in the Gaussian variable where the integrand is not smooth
/// (`scale == 0`) or varies on the length `scale`.
#[derive(Debug, Clone, Copy)]
pub struct Break {
    pub at: f64,
    pub scale: f64,
}

/// Half width of the truncated Gaussian domain used by panel quadrature.
pub const GAUSSIAN_CUTOFF: f64 = 14.0;

/// Weighted nodes `(y_i, w_i)` with `E[g(Y)] ~ sum w_i g(y_i)`, `Y ~ N(0,1)`.
///
/// Without breaks this is the Gauss-Hermite rule with `smooth_nodes` nodes.
/// With breaks the truncated line is cut at every break, graded around it by
/// `scale * 2^k`, and covered by unit-or-smaller Gauss-Legendre panels.
pub fn normal_nodes(breaks: &[Break], smooth_nodes: usize) -> Vec<(f64, f64)> {
    if breaks.is_empty() {
        let rule = gauss_hermite_cached(smooth_nodes);
        return rule.nodes.iter().copied().zip(rule.weights.iter().copied()).collect();
    }
    let lim = GAUSSIAN_CUTOFF;
    let mut edges: Vec<f64> = (-14..=14).map(|k| k as f64).collect();
    for b in breaks {
        if !b.at.is_finite() || b.at <= -lim || b.at >= lim {
            continue;
        }
        edges.push(b.at);
        if b.scale > 0.0 && b.scale < 1.0 {
            let mut off = b.scale.max(1e-7);
            while off < 1.0 {
                for e in [b.at - off, b.at + off] {
                    if e > -lim && e < lim {
                        edges.push(e);
                    }
                }
                off *= 2.0;
            }
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    let rule = gl12();
    let mut out = Vec::with_capacity(edges.len() * rule.nodes.len());
    for pair in edges.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let h = hi - lo;
        let mid = 0.5 * (lo + hi);
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let y = mid + 0.5 * h * x;
            out.push((y, 0.5 * h * w * normal_pdf(y)));
        }
    }
    out
}

/// Step used by central first differences at `x`.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Step used by central second differences at `x`.
#[inline]
pub fn fd_step2(x: f64) -> f64 {
    f64::EPSILON.powf(0.25) * x.abs().max(1.0)
}

pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let h = fd_step(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn central_diff2<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let h = fd_step2(x);
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Jacobian of `f: R^d -> R^k` by central differences.
pub fn fd_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], k: usize) -> DMatrix<f64> {
    let d = x.len();
    let mut jac = DMatrix::zeros(k, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..k {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Hessians (one per output component) of `f: R^d -> R^k` by central differences.
pub fn fd_hessians<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], k: usize) -> Vec<DMatrix<f64>> {
    let d = x.len();
    let mut hess = vec![DMatrix::zeros(d, d); k];
    let f0 = f(x);
    let mut xp = x.to_vec();
    for a in 0..d {
        let ha = fd_step2(x[a]);
        for b in a..d {
            let hb = fd_step2(x[b]);
            let vals = if a == b {
                xp[a] = x[a] + ha;
                let fp = f(&xp);
                xp[a] = x[a] - ha;
                let fm = f(&xp);
                xp[a] = x[a];
                (0..k).map(|i| (fp[i] - 2.0 * f0[i] + fm[i]) / (ha * ha)).collect::<Vec<_>>()
            } else {
                let mut eval = |sa: f64, sb: f64| {
                    xp[a] = x[a] + sa * ha;
                    xp[b] = x[b] + sb * hb;
                    let v = f(&xp);
                    xp[a] = x[a];
                    xp[b] = x[b];
                    v
                };
                let fpp = eval(1.0, 1.0);
                let fpm = eval(1.0, -1.0);
                let fmp = eval(-1.0, 1.0);
                let fmm = eval(-1.0, -1.0);
                (0..k)
                    .map(|i| (fpp[i] - fpm[i] - fmp[i] + fmm[i]) / (4.0 * ha * hb))
                    .collect()
            };
            for i in 0..k {
                hess[i][(a, b)] = vals[i];
                hess[i][(b, a)] = vals[i];
            }
        }
    }
    hess
}
