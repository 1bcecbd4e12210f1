//! Reproducing kernels for spline models on [0, 1].
//!
//! Two model spaces are provided, both second-order Sobolev spaces so the
//! penalty is the integrated squared second derivative:
//!
//! * the cubic spline, with two-dimensional null space `{1, k1}` and kernel
//!   `R1(x, z) = k2(x) k2(z) - k4(|x - z|)`;
//! * the periodic spline, with null space `{1}` and kernel
//!   `R1(x, z) = -k4(frac(x - z))`, whose eigensystem is known in closed
//!   form (used as the analytic reference in tests and error bounds).
//!
//! Here `k_r(x) = B_r(x) / r!` is the scaled Bernoulli polynomial.
//! Covariates live on [0, 1]; callers must rescale beforehand.

use ndarray::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Highest supported order of the scaled Bernoulli polynomials.
pub const MAX_BERNOULLI_ORDER: usize = 4;

/// Monomial coefficients (ascending powers) of k_r(x) = B_r(x)/r!.
const K_COEFFS: [&[f64]; MAX_BERNOULLI_ORDER + 1] = [
    // k0 = 1
    &[1.0],
    // k1 = x - 1/2
    &[-0.5, 1.0],
    // k2 = (x^2 - x + 1/6)/2
    &[1.0 / 12.0, -0.5, 0.5],
    // k3 = (x^3 - 3x^2/2 + x/2)/6
    &[0.0, 1.0 / 12.0, -0.25, 1.0 / 6.0],
    // k4 = (x^4 - 2x^3 + x^2 - 1/30)/24
    &[-1.0 / 720.0, 0.0, 1.0 / 24.0, -1.0 / 12.0, 1.0 / 24.0],
];

fn check_unit(x: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!(
            "{what} = {x} is outside the domain [0, 1]"
        )));
    }
    Ok(())
}

/// A scaled Bernoulli polynomial k_r(x) = B_r(x)/r! stored as an explicit
/// monomial coefficient table and evaluated by Horner's scheme.
#[derive(Debug, Clone, Copy)]
pub struct BernoulliScaled {
    order: usize,
    coeffs: &'static [f64],
}

impl BernoulliScaled {
    pub fn new(order: usize) -> Result<Self> {
        if order > MAX_BERNOULLI_ORDER {
            return Err(Error::InvalidArgument(format!(
                "Bernoulli order {order} exceeds the supported maximum {MAX_BERNOULLI_ORDER}"
            )));
        }
        Ok(Self {
            order,
            coeffs: K_COEFFS[order],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &'static [f64] {
        self.coeffs
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        check_unit(x, "x")?;
        Ok(horner(self.coeffs, x))
    }
}

#[inline]
fn horner(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

/// Evaluates k_r(x) = B_r(x)/r! for 0 <= r <= 4 and x in [0, 1].
pub fn bernoulli_k(order: usize, x: f64) -> Result<f64> {
    BernoulliScaled::new(order)?.eval(x)
}

#[inline]
fn k1(x: f64) -> f64 {
    x - 0.5
}

#[inline]
fn k2(x: f64) -> f64 {
    horner(K_COEFFS[2], x)
}

#[inline]
fn k4(x: f64) -> f64 {
    horner(K_COEFFS[4], x)
}

/// Which spline model space a kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplineKind {
    Cubic,
    Periodic,
}

impl SplineKind {
    pub fn name(&self) -> &'static str {
        match self {
            SplineKind::Cubic => "cubic",
            SplineKind::Periodic => "periodic",
        }
    }
}

impl std::str::FromStr for SplineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cubic" => Ok(SplineKind::Cubic),
            "periodic" => Ok(SplineKind::Periodic),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel '{other}' (expected 'cubic' or 'periodic')"
            ))),
        }
    }
}

/// A reproducing kernel together with its null-space basis.
///
/// The Sobolev order is fixed at m = 2. The null space has dimension 2 for
/// the cubic spline (constants and the centered linear term `k1`) and 1 for
/// the periodic spline (constants only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Kernel {
    kind: SplineKind,
}

impl Kernel {
    pub fn cubic() -> Self {
        Kernel {
            kind: SplineKind::Cubic,
        }
    }

    pub fn periodic() -> Self {
        Kernel {
            kind: SplineKind::Periodic,
        }
    }

    pub fn new(kind: SplineKind) -> Self {
        Kernel { kind }
    }

    pub fn kind(&self) -> SplineKind {
        self.kind
    }

    pub const fn sobolev_order(&self) -> usize {
        2
    }

    /// Dimension p of the unpenalized null space.
    pub fn null_dim(&self) -> usize {
        match self.kind {
            SplineKind::Cubic => 2,
            SplineKind::Periodic => 1,
        }
    }

    /// Evaluates the null-space basis function with 0-based index `nu`.
    pub fn null_basis(&self, nu: usize, x: f64) -> f64 {
        debug_assert!(nu < self.null_dim());
        match (self.kind, nu) {
            (_, 0) => 1.0,
            (SplineKind::Cubic, 1) => k1(x),
            _ => panic!("null basis index {nu} out of range"),
        }
    }

    /// Pointwise kernel evaluation R1(x, z); errors on domain violations.
    pub fn rk(&self, x: f64, z: f64) -> Result<f64> {
        check_unit(x, "x")?;
        check_unit(z, "z")?;
        Ok(self.rk_unchecked(x, z))
    }

    #[inline]
    pub(crate) fn rk_unchecked(&self, x: f64, z: f64) -> f64 {
        match self.kind {
            SplineKind::Cubic => k2(x) * k2(z) - k4((x - z).abs()),
            SplineKind::Periodic => -k4((x - z).rem_euclid(1.0)),
        }
    }

    /// Kernel row (R1(x, s_1), ..., R1(x, s_N)) written into `out`.
    pub(crate) fn rk_row(&self, x: f64, points: &[f64], out: &mut [f64]) {
        debug_assert_eq!(points.len(), out.len());
        for (o, &s) in out.iter_mut().zip(points) {
            *o = self.rk_unchecked(x, s);
        }
    }
}

/// Pointwise kernel evaluation R1(x, z).
pub fn rk_eval(kernel: &Kernel, x: f64, z: f64) -> Result<f64> {
    kernel.rk(x, z)
}

/// Observed design points and responses.
#[derive(Debug, Clone)]
pub struct DataSet {
    x: Array1<f64>,
    y: Array1<f64>,
}

impl DataSet {
    pub fn new(x: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "x has {} entries but y has {}",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::InvalidArgument("empty data set".into()));
        }
        for (i, &xi) in x.iter().enumerate() {
            if !(0.0..=1.0).contains(&xi) {
                return Err(Error::InvalidArgument(format!(
                    "design point x[{i}] = {xi} is outside [0, 1]"
                )));
            }
        }
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "response y[{i}] = {yi} is not finite"
                )));
            }
        }
        Ok(DataSet { x, y })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let x = Array1::from_iter(pairs.iter().map(|p| p.0));
        let y = Array1::from_iter(pairs.iter().map(|p| p.1));
        Self::new(x, y)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &Array1<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }
}

/// Dense Gram matrix of the kernel on the given points.
///
/// The upper triangle is computed and mirrored so the result is symmetric
/// bit-for-bit.
pub fn gram_sigma(kernel: &Kernel, xs: &[f64]) -> Result<Array2<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(
            "gram_sigma requires at least one point".into(),
        ));
    }
    for &x in xs {
        check_unit(x, "design point")?;
    }
    let n = xs.len();
    let mut sigma = Array2::zeros((n, n));
    // Rows are independent; fill the upper triangle in parallel.
    sigma
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let xi = xs[i];
            for j in i..n {
                row[j] = kernel.rk_unchecked(xi, xs[j]);
            }
        });
    for i in 1..n {
        for j in 0..i {
            sigma[[i, j]] = sigma[[j, i]];
        }
    }
    Ok(sigma)
}

/// Cross Gram matrix {R1(x_i, s_j)} for rows `xs` against columns `points`.
pub fn gram_cross(kernel: &Kernel, xs: &[f64], points: &[f64]) -> Result<Array2<f64>> {
    if xs.is_empty() || points.is_empty() {
        return Err(Error::InvalidArgument(
            "gram_cross requires nonempty point sets".into(),
        ));
    }
    for &x in xs.iter().chain(points.iter()) {
        check_unit(x, "point")?;
    }
    let mut m = Array2::zeros((xs.len(), points.len()));
    m.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            kernel.rk_row(xs[i], points, row.as_slice_mut().expect("contiguous row"));
        });
    Ok(m)
}

/// Null-space design matrix T with T[i, nu] = phi_nu(x_i).
///
/// Errors when T is rank deficient (all design points equal, for the cubic
/// spline), since the solvers assume full column rank.
pub fn null_matrix(kernel: &Kernel, xs: &[f64]) -> Result<Array2<f64>> {
    let p = kernel.null_dim();
    if xs.len() < p {
        return Err(Error::InvalidArgument(format!(
            "need at least {p} points for a rank-{p} null space, got {}",
            xs.len()
        )));
    }
    for &x in xs {
        check_unit(x, "design point")?;
    }
    let t = Array2::from_shape_fn((xs.len(), p), |(i, nu)| kernel.null_basis(nu, xs[i]));
    // Full-column-rank check through the p x p cross-product spectrum.
    let tt = t.t().dot(&t);
    let (evals, _) = crate::linalg::eigh_desc(&tt.view())?;
    let max = evals[0].max(0.0);
    let min = evals[evals.len() - 1].max(0.0);
    if max <= 0.0 || min <= 1e-24 * max {
        return Err(Error::DegenerateDesign(
            "null-space design matrix is rank deficient (are all design points equal?)".into(),
        ));
    }
    Ok(t)
}
