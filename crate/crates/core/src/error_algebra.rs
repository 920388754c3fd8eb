//! Finite-dimensional error structures.
//!
//! An [`ErrorVector`] carries values together with the conditional
//! covariance `gamma` of their infinitesimal errors and, optionally, the
//! conditional mean `bias`. Maps act on it through the first-order rule
//! `gamma -> J gamma J^T` and the second-order rule
//! `A[F(f)] = sum_i F'_i A f_i + 1/2 sum_ij F''_ij gamma_ij`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{input, Error, Result};
use crate::numerics::{fd_hessians, fd_jacobian};

pub type VecFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type HessFn = Arc<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Relative PSD tolerance: eigenvalues may dip to `-PSD_TOL * trace`.
pub const PSD_TOL: f64 = 1e-10;

/// Checks symmetry and positive semidefiniteness up to [`PSD_TOL`].
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return input(format!("gamma must be square, got {}x{}", m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gamma has non-finite entries".into()));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return input(format!("gamma is not symmetric at ({i},{j})"));
            }
        }
    }
    let trace = m.trace().abs();
    let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min_eig < -PSD_TOL * trace.max(f64::MIN_POSITIVE) {
        return input(format!("gamma is not positive semidefinite (eigenvalue {min_eig:e})"));
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Values with the covariance and (optionally) the bias of their errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorVector {
    values: DVector<f64>,
    gamma: DMatrix<f64>,
    bias: Option<DVector<f64>>,
}

impl ErrorVector {
    pub fn new(values: Vec<f64>, gamma: DMatrix<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        let d = values.len();
        if d == 0 {
            return input("an error vector needs at least one component");
        }
        if gamma.nrows() != d || gamma.ncols() != d {
            return input(format!("gamma is {}x{}, expected {d}x{d}", gamma.nrows(), gamma.ncols()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return input("values must be finite");
        }
        check_psd(&gamma)?;
        let bias = match bias {
            Some(b) if b.len() != d => return input(format!("bias has length {}, expected {d}", b.len())),
            Some(b) if b.iter().any(|v| !v.is_finite()) => return input("bias must be finite"),
            Some(b) => Some(DVector::from_vec(b)),
            None => None,
        };
        Ok(Self { values: DVector::from_vec(values), gamma, bias })
    }

    /// Independent errors with the given variances.
    pub fn independent(values: Vec<f64>, variances: &[f64], bias: Option<Vec<f64>>) -> Result<Self> {
        let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        Self::new(values, gamma, bias)
    }

    /// Errors described by a field of covariance matrices evaluated at `values`.
    pub fn from_field(values: Vec<f64>, field: &GammaField, bias: Option<Vec<f64>>) -> Result<Self> {
        if values.len() != field.dim {
            return input(format!("field has dimension {}, values {}", field.dim, values.len()));
        }
        let gamma = field.at(&values);
        Self::new(values, gamma, bias)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn bias(&self) -> Option<&DVector<f64>> {
        self.bias.as_ref()
    }
}

/// How a derivative of a [`SmoothMap`] is obtained.
#[derive(Clone)]
pub enum Derivative<T> {
    Analytic(T),
    FiniteDifference,
}

/// A map `R^d -> R^k` with first and (optionally) second derivatives.
#[derive(Clone)]
pub struct SmoothMap {
    dim_in: usize,
    dim_out: usize,
    eval: VecFn,
    jacobian: Derivative<MatFn>,
    hessians: Option<Derivative<HessFn>>,
}

impl fmt::Debug for SmoothMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothMap")
            .field("dim_in", &self.dim_in)
            .field("dim_out", &self.dim_out)
            .field("analytic_jacobian", &matches!(self.jacobian, Derivative::Analytic(_)))
            .field("hessians", &self.hessians.as_ref().map(|h| matches!(h, Derivative::Analytic(_))))
            .finish()
    }
}

impl SmoothMap {
    /// A map whose Jacobian falls back to central differences and which has
    /// no second-order information until one is attached.
    pub fn new<F>(dim_in: usize, dim_out: usize, eval: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self { dim_in, dim_out, eval: Arc::new(eval), jacobian: Derivative::FiniteDifference, hessians: None }
    }

    pub fn with_jacobian<F>(mut self, jac: F) -> Self
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Derivative::Analytic(Arc::new(jac));
        self
    }

    pub fn with_hessians<F>(mut self, hess: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    {
        self.hessians = Some(Derivative::Analytic(Arc::new(hess)));
        self
    }

    /// Enables bias propagation with finite-difference Hessians.
    pub fn with_fd_hessians(mut self) -> Self {
        self.hessians = Some(Derivative::FiniteDifference);
        self
    }

    pub fn identity(d: usize) -> Self {
        Self::new(d, d, |x| x.to_vec())
            .with_jacobian(move |_| DMatrix::identity(d, d))
            .with_hessians(move |_| vec![DMatrix::zeros(d, d); d])
    }

    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let (k, d) = matrix.shape();
        let m = matrix.clone();
        Self::new(d, k, move |x| (&m * DVector::from_column_slice(x)).iter().copied().collect())
            .with_jacobian(move |_| matrix.clone())
            .with_hessians(move |_| vec![DMatrix::zeros(d, d); k])
    }

    pub fn constant(dim_in: usize, values: Vec<f64>) -> Self {
        let k = values.len();
        Self::new(dim_in, k, move |_| values.clone())
            .with_jacobian(move |_| DMatrix::zeros(k, dim_in))
            .with_hessians(move |_| vec![DMatrix::zeros(dim_in, dim_in); k])
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn has_hessians(&self) -> bool {
        self.hessians.is_some()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.eval)(x)
    }

    pub fn jacobian_at(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.jacobian {
            Derivative::Analytic(j) => j(x),
            Derivative::FiniteDifference => fd_jacobian(|v| (self.eval)(v), x, self.dim_out),
        }
    }

    pub fn hessians_at(&self, x: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        match self.hessians.as_ref()? {
            Derivative::Analytic(h) => Some(h(x)),
            Derivative::FiniteDifference => Some(fd_hessians(|v| (self.eval)(v), x, self.dim_out)),
        }
    }

    /// `self ∘ inner`, with chain-rule Jacobian and Hessians.
    pub fn compose(&self, inner: &SmoothMap) -> Result<SmoothMap> {
        if inner.dim_out != self.dim_in {
            return input(format!(
                "cannot compose: inner map outputs {} values, outer expects {}",
                inner.dim_out, self.dim_in
            ));
        }
        let (outer_e, inner_e) = (self.clone(), inner.clone());
        let mut composed = SmoothMap::new(inner.dim_in, self.dim_out, move |x| outer_e.eval(&inner_e.eval(x)));
        let (outer_j, inner_j) = (self.clone(), inner.clone());
        composed = composed.with_jacobian(move |x| {
            let y = inner_j.eval(x);
            outer_j.jacobian_at(&y) * inner_j.jacobian_at(x)
        });
        if self.has_hessians() && inner.has_hessians() {
            let (outer_h, inner_h) = (self.clone(), inner.clone());
            composed = composed.with_hessians(move |x| {
                let y = inner_h.eval(x);
                let jg = inner_h.jacobian_at(x);
                let jf = outer_h.jacobian_at(&y);
                let hf = outer_h.hessians_at(&y).expect("outer hessians");
                let hg = inner_h.hessians_at(x).expect("inner hessians");
                hf.iter()
                    .enumerate()
                    .map(|(k, hfk)| {
                        let mut h = jg.transpose() * hfk * &jg;
                        for (l, hgl) in hg.iter().enumerate() {
                            h += hgl * jf[(k, l)];
                        }
                        h
                    })
                    .collect()
            });
        }
        Ok(composed)
    }

    /// Compares analytic derivatives with central differences of `eval` at
    /// each point; fails if any entry differs by more than `rel_tol`
    /// relative to the size of the derivative.
    pub fn self_test(&self, points: &[Vec<f64>], rel_tol: f64) -> Result<()> {
        for p in points {
            if p.len() != self.dim_in {
                return input(format!("test point has length {}, expected {}", p.len(), self.dim_in));
            }
            if let Derivative::Analytic(j) = &self.jacobian {
                let analytic = j(p);
                let numeric = fd_jacobian(|v| (self.eval)(v), p, self.dim_out);
                compare(&analytic, &numeric, rel_tol, "jacobian", p)?;
            }
            if let Some(Derivative::Analytic(h)) = &self.hessians {
                let analytic = h(p);
                let numeric = fd_hessians(|v| (self.eval)(v), p, self.dim_out);
                for (a, n) in analytic.iter().zip(&numeric) {
                    compare(a, n, rel_tol, "hessian", p)?;
                }
            }
        }
        Ok(())
    }
}

fn compare(a: &DMatrix<f64>, n: &DMatrix<f64>, tol: f64, what: &str, at: &[f64]) -> Result<()> {
    if a.shape() != n.shape() {
        return input(format!("{what} has shape {:?}, expected {:?}", a.shape(), n.shape()));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(n.iter()) {
        if (x - y).abs() > tol * scale {
            return Err(Error::Numeric(format!(
                "analytic {what} {x} disagrees with finite differences {y} at {at:?}"
            )));
        }
    }
    Ok(())
}

/// Image of an error vector under `f`.
///
/// The bias of the result is filled in only when `f` carries Hessians and
/// the input carries a bias; otherwise it is absent.
pub fn propagate_gamma(f: &SmoothMap, x: &ErrorVector) -> Result<ErrorVector> {
    if f.dim_in != x.dim() {
        return input(format!("map expects {} inputs, error vector has {}", f.dim_in, x.dim()));
    }
    let point: Vec<f64> = x.values.iter().copied().collect();
    let jac = f.jacobian_at(&point);
    if jac.shape() != (f.dim_out, f.dim_in) {
        return input(format!("jacobian has shape {:?}, expected ({}, {})", jac.shape(), f.dim_out, f.dim_in));
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("jacobian has non-finite entries".into()));
    }
    let values = f.eval(&point);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("map value is not finite".into()));
    }
    let mut gamma = &jac * &x.gamma * jac.transpose();
    symmetrize(&mut gamma);
    let bias = match (&x.bias, f.has_hessians()) {
        (Some(_), true) => Some(bias_with_jacobian(f, x, &jac)?),
        _ => None,
    };
    Ok(ErrorVector { values: DVector::from_vec(values), gamma, bias })
}

/// `A[F(f)]` for each output component of `f`.
pub fn propagate_bias(f: &SmoothMap, x: &ErrorVector) -> Result<DVector<f64>> {
    if f.dim_in != x.dim() {
        return input(format!("map expects {} inputs, error vector has {}", f.dim_in, x.dim()));
    }
    if !f.has_hessians() {
        return Err(Error::Capability("bias propagation needs second derivatives of the map".into()));
    }
    if x.bias.is_none() {
        return input("bias propagation needs the input bias");
    }
    let point: Vec<f64> = x.values.iter().copied().collect();
    let jac = f.jacobian_at(&point);
    bias_with_jacobian(f, x, &jac)
}

fn bias_with_jacobian(f: &SmoothMap, x: &ErrorVector, jac: &DMatrix<f64>) -> Result<DVector<f64>> {
    let point: Vec<f64> = x.values.iter().copied().collect();
    let hess = f.hessians_at(&point).expect("checked by caller");
    let a = x.bias.as_ref().expect("checked by caller");
    let mut out = jac * a;
    for (k, h) in hess.iter().enumerate() {
        out[k] += 0.5 * h.component_mul(&x.gamma).sum();
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("propagated bias is not finite".into()));
    }
    Ok(out)
}

/// `F'(f) A[f] + 1/2 F''(f) Γ[f]` for a scalar map.
#[inline]
pub fn scalar_bias(d1: f64, d2: f64, bias: f64, gamma: f64) -> f64 {
    d1 * bias + 0.5 * d2 * gamma
}

/// A scalar map with its first two derivatives.
#[derive(Clone)]
pub struct ScalarMap {
    pub f: RealFn,
    pub df: RealFn,
    pub d2f: RealFn,
}

impl fmt::Debug for ScalarMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ScalarMap")
    }
}

impl ScalarMap {
    pub fn new<F, D, D2>(f: F, df: D, d2f: D2) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), df: Arc::new(df), d2f: Arc::new(d2f) }
    }

    pub fn identity() -> Self {
        Self::new(|x| x, |_| 1.0, |_| 0.0)
    }

    pub fn square() -> Self {
        Self::new(|x| x * x, |x| 2.0 * x, |_| 2.0)
    }

    /// `self ∘ inner` with the one-dimensional chain rules.
    pub fn after(&self, inner: &ScalarMap) -> ScalarMap {
        let (o, i) = (self.clone(), inner.clone());
        let (o1, i1) = (self.clone(), inner.clone());
        let (o2, i2) = (self.clone(), inner.clone());
        ScalarMap::new(
            move |x| (o.f)((i.f)(x)),
            move |x| (o1.df)((i1.f)(x)) * (i1.df)(x),
            move |x| {
                let y = (i2.f)(x);
                let g1 = (i2.df)(x);
                (o2.d2f)(y) * g1 * g1 + (o2.df)(y) * (i2.d2f)(x)
            },
        )
    }
}

/// State of the scalar transport recursion after a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportState {
    pub x: f64,
    pub bias: f64,
    pub variance: f64,
}

/// Pushes a small error through `fs` one map at a time:
/// `bias <- bias f' + variance f''/2`, `variance <- variance f'^2`.
/// The returned list starts with the initial state.
pub fn transport_sequence(fs: &[ScalarMap], x0: f64, bias0: f64, var0: f64) -> Result<Vec<TransportState>> {
    if var0 < 0.0 {
        return input("initial variance must be nonnegative");
    }
    let mut out = Vec::with_capacity(fs.len() + 1);
    let mut state = TransportState { x: x0, bias: bias0, variance: var0 };
    out.push(state);
    for (n, f) in fs.iter().enumerate() {
        let d1 = (f.df)(state.x);
        let d2 = (f.d2f)(state.x);
        state = TransportState {
            x: (f.f)(state.x),
            bias: scalar_bias(d1, d2, state.bias, state.variance),
            variance: state.variance * d1 * d1,
        };
        if !(state.x.is_finite() && state.bias.is_finite() && state.variance.is_finite()) {
            return Err(Error::Numeric(format!("transport overflowed at step {}", n + 1)));
        }
        out.push(state);
    }
    Ok(out)
}

/// A field of covariance matrices over the value space.
#[derive(Clone)]
pub struct GammaField {
    dim: usize,
    field: MatFn,
}

impl fmt::Debug for GammaField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GammaField").field("dim", &self.dim).finish()
    }
}

impl GammaField {
    pub fn new<F>(dim: usize, field: F) -> Self
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self { dim, field: Arc::new(field) }
    }

    pub fn constant(matrix: DMatrix<f64>) -> Result<Self> {
        check_psd(&matrix)?;
        let dim = matrix.nrows();
        Ok(Self::new(dim, move |_| matrix.clone()))
    }

    /// One-dimensional `γ[f] = f'^2` (unit errors independent of the value).
    pub fn unit() -> Self {
        Self::new(1, |_| DMatrix::from_element(1, 1, 1.0))
    }

    /// Constant proportional errors: `Γ[v_i] = v_i^2`, uncorrelated.
    pub fn proportional(dim: usize) -> Self {
        Self::new(dim, move |v| DMatrix::from_diagonal(&DVector::from_iterator(dim, v.iter().map(|x| x * x))))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, v: &[f64]) -> DMatrix<f64> {
        (self.field)(v)
    }

    /// Verifies symmetry and positive semidefiniteness at each point.
    pub fn check(&self, points: &[Vec<f64>]) -> Result<()> {
        for p in points {
            let m = self.at(p);
            if m.shape() != (self.dim, self.dim) {
                return input(format!("field returned shape {:?}, expected {}x{}", m.shape(), self.dim, self.dim));
            }
            check_psd(&m)?;
        }
        Ok(())
    }
}

/// Product of independent error structures: the coordinates are
/// concatenated and the covariance field is block diagonal.
pub fn product_structure(fields: &[GammaField]) -> Result<GammaField> {
    if fields.is_empty() {
        return input("a product structure needs at least one factor");
    }
    let factors: Vec<GammaField> = fields.to_vec();
    let dim = factors.iter().map(|f| f.dim).sum();
    Ok(GammaField::new(dim, move |v| {
        let mut m = DMatrix::zeros(dim, dim);
        let mut offset = 0;
        for f in &factors {
            let block = f.at(&v[offset..offset + f.dim]);
            m.view_mut((offset, offset), (f.dim, f.dim)).copy_from(&block);
            offset += f.dim;
        }
        m
    }))
}

/// Errors on the tip `B` of a two-segment construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleErrors {
    pub x_b: f64,
    pub y_b: f64,
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub gamma_xy: f64,
}

fn check_triangle(l1: f64, l2: f64, theta1: f64, theta2: f64) -> Result<()> {
    let pi = std::f64::consts::PI;
    if !(l1 > 0.0 && l2 > 0.0 && l1.is_finite() && l2.is_finite()) {
        return input(format!("lengths must be positive and finite, got {l1}, {l2}"));
    }
    if !((0.0..=pi).contains(&theta1) && (0.0..=pi).contains(&theta2)) {
        return input(format!("angles must lie in [0, pi], got {theta1}, {theta2}"));
    }
    Ok(())
}

/// Closed-form errors on `B = (l1 cos θ1 + l2 cos(θ1+θ2), l1 sin θ1 + l2 sin(θ1+θ2))`
/// when lengths carry proportional errors correlated by one half and
/// angles carry unit errors correlated by one half.
pub fn triangle_errors(l1: f64, l2: f64, theta1: f64, theta2: f64) -> Result<TriangleErrors> {
    check_triangle(l1, l2, theta1, theta2)?;
    let t12 = theta1 + theta2;
    let (s1, c1) = theta1.sin_cos();
    let (s12, c12) = t12.sin_cos();
    let ll = l1 * l2;
    Ok(TriangleErrors {
        x_b: l1 * c1 + l2 * c12,
        y_b: l1 * s1 + l2 * s12,
        gamma_x: l1 * l1 + ll * (theta2.cos() + 2.0 * s1 * s12) + l2 * l2 * (1.0 + 2.0 * s12 * s12),
        gamma_y: l1 * l1 + ll * (theta2.cos() + 2.0 * c1 * c12) + l2 * l2 * (1.0 + 2.0 * c12 * c12),
        gamma_xy: -ll * (2.0 * theta1 + theta2).sin() - l2 * l2 * (2.0 * t12).sin(),
    })
}

/// Covariance field on `(l1, l2, θ1, θ2)` behind [`triangle_errors`].
pub fn triangle_field() -> GammaField {
    GammaField::new(4, |v| {
        let (l1, l2) = (v[0], v[1]);
        DMatrix::from_row_slice(
            4,
            4,
            &[
                l1 * l1,
                0.5 * l1 * l2,
                0.0,
                0.0,
                0.5 * l1 * l2,
                l2 * l2,
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
                0.5,
                0.0,
                0.0,
                0.5,
                1.0,
            ],
        )
    })
}

/// `(l1, l2, θ1, θ2) -> (X_B, Y_B)` with its analytic Jacobian.
pub fn triangle_map() -> SmoothMap {
    SmoothMap::new(4, 2, |v| {
        let (l1, l2, t1, t2) = (v[0], v[1], v[2], v[3]);
        vec![l1 * t1.cos() + l2 * (t1 + t2).cos(), l1 * t1.sin() + l2 * (t1 + t2).sin()]
    })
    .with_jacobian(|v| {
        let (l1, l2, t1, t2) = (v[0], v[1], v[2], v[3]);
        let (s1, c1) = t1.sin_cos();
        let (s12, c12) = (t1 + t2).sin_cos();
        DMatrix::from_row_slice(
            2,
            4,
            &[c1, c12, -l1 * s1 - l2 * s12, -l2 * s12, s1, s12, l1 * c1 + l2 * c12, l2 * c12],
        )
    })
}

/// The same three quantities as [`triangle_errors`], obtained by matrix
/// propagation through [`triangle_map`].
pub fn triangle_errors_by_propagation(l1: f64, l2: f64, theta1: f64, theta2: f64) -> Result<TriangleErrors> {
    check_triangle(l1, l2, theta1, theta2)?;
    let x = ErrorVector::from_field(vec![l1, l2, theta1, theta2], &triangle_field(), None)?;
    let out = propagate_gamma(&triangle_map(), &x)?;
    Ok(TriangleErrors {
        x_b: out.values[0],
        y_b: out.values[1],
        gamma_x: out.gamma[(0, 0)],
        gamma_y: out.gamma[(1, 1)],
        gamma_xy: out.gamma[(0, 1)],
    })
}
