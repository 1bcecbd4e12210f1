//! Spline solvers: the exact penalized least-squares fit, low-rank ridge
//! fits (eigenbasis, Nystrom, random representer subsets), prediction, and
//! GML selection of the smoothing parameter.
//!
//! The penalty weight is `n * lambda` throughout, so lambda values are
//! comparable across methods.

use std::sync::OnceLock;

use ndarray::prelude::*;
use ndarray_linalg::cholesky::{FactorizeC, SolveC, UPLO};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::eigensys::{
    analytic_delta, analytic_eigensystem, feature_matrix, EigenSystemCache, TruncatedEigenBasis,
};
use crate::kernels::{gram_cross, gram_sigma, null_matrix, DataSet, Kernel, SplineKind};
use crate::linalg::eigh_desc;
use crate::{Error, Result};

/// Threshold on the normal-matrix condition number above which the ridge
/// solve falls back to a QR factorization of the stacked augmented system.
const RIDGE_CONDITION_LIMIT: f64 = 1e8;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing parameter must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// QR factorization of the null-space design matrix
// ---------------------------------------------------------------------------

/// Householder QR of a full-column-rank n x p matrix, T = Q1 R, with access
/// to the orthogonal complement Q2.
///
/// The reflectors are stored so that products with Q, Q1, or Q2 cost
/// O(n p) per vector; Q2 itself is only materialized on demand.
#[derive(Debug, Clone)]
pub struct QrFactors {
    n: usize,
    p: usize,
    /// Reflector j lives in column j, rows j.. (unit leading entry).
    reflectors: Array2<f64>,
    taus: Vec<f64>,
    q1: Array2<f64>,
    r: Array2<f64>,
}

impl QrFactors {
    pub fn new(t: &Array2<f64>) -> Result<Self> {
        let (n, p) = t.dim();
        if p == 0 || n < p {
            return Err(Error::InvalidArgument(format!(
                "QR factorization needs n >= p >= 1, got {n} x {p}"
            )));
        }
        let mut a = t.clone();
        let mut reflectors = Array2::zeros((n, p));
        let mut taus = vec![0.0; p];
        for j in 0..p {
            let alpha = a[[j, j]];
            let tail_norm_sq: f64 = (j + 1..n).map(|i| a[[i, j]] * a[[i, j]]).sum();
            if tail_norm_sq == 0.0 {
                reflectors[[j, j]] = 1.0;
                taus[j] = 0.0;
                continue;
            }
            let beta = -alpha.signum() * (alpha * alpha + tail_norm_sq).sqrt();
            let tau = (beta - alpha) / beta;
            let scale = alpha - beta;
            reflectors[[j, j]] = 1.0;
            for i in j + 1..n {
                reflectors[[i, j]] = a[[i, j]] / scale;
            }
            taus[j] = tau;
            a[[j, j]] = beta;
            for i in j + 1..n {
                a[[i, j]] = 0.0;
            }
            // Apply H_j to the remaining columns.
            for k in j + 1..p {
                let mut w = a[[j, k]];
                for i in j + 1..n {
                    w += reflectors[[i, j]] * a[[i, k]];
                }
                w *= tau;
                a[[j, k]] -= w;
                for i in j + 1..n {
                    a[[i, k]] -= reflectors[[i, j]] * w;
                }
            }
        }
        let r = a.slice(s![..p, ..p]).to_owned();
        // Full-column-rank check through the spectrum of R^T R.
        let rtr = r.t().dot(&r);
        let (svals, _) = eigh_desc(&rtr.view())?;
        let max = svals[0].max(0.0);
        let min = svals[p - 1].max(0.0);
        if max <= 0.0 || min <= 1e-24 * max {
            return Err(Error::DegenerateDesign(
                "design matrix is rank deficient in the QR factorization".into(),
            ));
        }
        let mut qr = QrFactors {
            n,
            p,
            reflectors,
            taus,
            q1: Array2::zeros((0, 0)),
            r,
        };
        let mut q1 = Array2::zeros((n, p));
        for j in 0..p {
            let mut e = Array1::zeros(n);
            e[j] = 1.0;
            qr.apply_q(&mut e);
            q1.column_mut(j).assign(&e);
        }
        qr.q1 = q1;
        Ok(qr)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q1(&self) -> &Array2<f64> {
        &self.q1
    }

    pub fn r(&self) -> &Array2<f64> {
        &self.r
    }

    /// Materializes Q2 (n x (n - p)).
    pub fn q2(&self) -> Array2<f64> {
        let mut q2 = Array2::zeros((self.n, self.n - self.p));
        for (col, j) in (self.p..self.n).enumerate() {
            let mut e = Array1::zeros(self.n);
            e[j] = 1.0;
            self.apply_q(&mut e);
            q2.column_mut(col).assign(&e);
        }
        q2
    }

    fn apply_reflector_vec(&self, j: usize, x: &mut Array1<f64>) {
        let tau = self.taus[j];
        if tau == 0.0 {
            return;
        }
        let mut w = 0.0;
        for i in j..self.n {
            w += self.reflectors[[i, j]] * x[i];
        }
        w *= tau;
        for i in j..self.n {
            x[i] -= self.reflectors[[i, j]] * w;
        }
    }

    /// x <- Q^T x.
    pub fn apply_qt(&self, x: &mut Array1<f64>) {
        for j in 0..self.p {
            self.apply_reflector_vec(j, x);
        }
    }

    /// x <- Q x.
    pub fn apply_q(&self, x: &mut Array1<f64>) {
        for j in (0..self.p).rev() {
            self.apply_reflector_vec(j, x);
        }
    }

    /// Q1^T x (length p).
    pub fn q1t_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut v = x.clone();
        self.apply_qt(&mut v);
        v.slice(s![..self.p]).to_owned()
    }

    /// Q2^T x (length n - p).
    pub fn q2t_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut v = x.clone();
        self.apply_qt(&mut v);
        v.slice(s![self.p..]).to_owned()
    }

    /// Q2 w for a length n - p vector.
    pub fn q2_times(&self, w: &Array1<f64>) -> Array1<f64> {
        let mut x = Array1::zeros(self.n);
        x.slice_mut(s![self.p..]).assign(w);
        self.apply_q(&mut x);
        x
    }

    /// Q2^T A Q2 for a symmetric n x n matrix, computed by applying the
    /// reflectors from both sides; costs O(p n^2) instead of a dense
    /// n^3 product.
    pub fn q2t_sym_q2(&self, a: &Array2<f64>) -> Array2<f64> {
        let n = self.n;
        let mut m = a.clone();
        let mut w = vec![0.0; n];
        for j in 0..self.p {
            let tau = self.taus[j];
            if tau == 0.0 {
                continue;
            }
            let v = self.reflectors.column(j);
            // Left: M <- M - tau v (v^T M).
            w.iter_mut().for_each(|x| *x = 0.0);
            for i in j..n {
                let vi = v[i];
                if vi != 0.0 {
                    let row = m.row(i);
                    for (k, wk) in w.iter_mut().enumerate() {
                        *wk += vi * row[k];
                    }
                }
            }
            for i in j..n {
                let f = tau * v[i];
                if f != 0.0 {
                    let mut row = m.row_mut(i);
                    for (k, wk) in w.iter().enumerate() {
                        row[k] -= f * wk;
                    }
                }
            }
            // Right: M <- M - tau (M v) v^T.
            for i in 0..n {
                let row = m.row(i);
                let mut acc = 0.0;
                for k in j..n {
                    acc += row[k] * v[k];
                }
                w[i] = acc;
            }
            for i in 0..n {
                let f = tau * w[i];
                if f != 0.0 {
                    let mut row = m.row_mut(i);
                    for k in j..n {
                        row[k] -= f * v[k];
                    }
                }
            }
        }
        m.slice(s![self.p.., self.p..]).to_owned()
    }

    /// Solves R x = rhs by back substitution.
    pub fn solve_r(&self, rhs: &Array1<f64>) -> Array1<f64> {
        let p = self.p;
        let mut x = rhs.clone();
        for i in (0..p).rev() {
            let mut acc = x[i];
            for k in i + 1..p {
                acc -= self.r[[i, k]] * x[k];
            }
            x[i] = acc / self.r[[i, i]];
        }
        x
    }

    /// Smallest singular value of T (equals that of R).
    pub fn sigma_min(&self) -> f64 {
        let rtr = self.r.t().dot(&self.r);
        let (svals, _) = eigh_desc(&rtr.view()).expect("p x p eigendecomposition");
        svals[self.p - 1].max(0.0).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Exact fit through the QR route
// ---------------------------------------------------------------------------

/// Coefficients (c, d) from solving the penalized system with a given Gram
/// matrix: c = Q2 (Q2^T (S + n lambda I) Q2)^{-1} Q2^T y and
/// d = R^{-1} Q1^T (y - (S + n lambda I) c).
///
/// With the exact Gram this is the smoothing spline solution; bounds
/// computations reuse it with approximated Gram matrices.
#[derive(Debug, Clone)]
pub struct GramFit {
    pub c: Array1<f64>,
    pub d: Array1<f64>,
    pub lambda: f64,
}

/// Solves the penalized system for an arbitrary (symmetric PSD) Gram matrix.
pub fn fit_with_gram(
    y: &Array1<f64>,
    sigma: &Array2<f64>,
    qr: &QrFactors,
    lambda: f64,
) -> Result<GramFit> {
    check_lambda(lambda)?;
    let n = y.len();
    if sigma.dim() != (n, n) || qr.n() != n {
        return Err(Error::InvalidArgument(
            "Gram matrix, QR factors, and response dimensions disagree".into(),
        ));
    }
    let nl = n as f64 * lambda;
    let mut m = qr.q2t_sym_q2(sigma);
    for i in 0..n - qr.p() {
        m[[i, i]] += nl;
    }
    let z2 = qr.q2t_vec(y);
    let factor = m.factorizec(UPLO::Lower).map_err(|e| {
        Error::Numerical(format!(
            "inner solve breakdown (penalized system not SPD): {e}"
        ))
    })?;
    let w = factor
        .solvec(&z2)
        .map_err(|e| Error::Numerical(format!("inner solve failed: {e}")))?;
    let c = qr.q2_times(&w);
    let d = exact_d_from_c(y, sigma, qr, &c, nl);
    Ok(GramFit { c, d, lambda })
}

fn exact_d_from_c(
    y: &Array1<f64>,
    sigma: &Array2<f64>,
    qr: &QrFactors,
    c: &Array1<f64>,
    nl: f64,
) -> Array1<f64> {
    let u = y - &sigma.dot(c) - &(c * nl);
    qr.solve_r(&qr.q1t_vec(&u))
}

// ---------------------------------------------------------------------------
// Fit results and prediction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    All,
    Eigen,
    Nystrom,
    Rsr,
}

impl FitMethod {
    pub fn label(&self) -> &'static str {
        match self {
            FitMethod::All => "ALL",
            FitMethod::Eigen => "EIGEN",
            FitMethod::Nystrom => "NYSTROM",
            FitMethod::Rsr => "RSR",
        }
    }
}

/// Everything prediction needs besides the coefficients.
#[derive(Debug, Clone)]
pub enum BasisHandle {
    /// Representers at all design points (exact fit); `x` are the design
    /// points carrying coefficient vector c.
    Representers { x: Array1<f64> },
    /// Analytic eigenbasis (periodic kernel) with eigenvalues `deltas`.
    AnalyticEigen { deltas: Array1<f64> },
    /// Grid cache basis: prediction is kernel_row(x, s) . projection . b
    /// with projection = V1 Gamma1^{-1/2}.
    CachedEigen {
        s: Array1<f64>,
        projection: Array2<f64>,
        cache_points: usize,
    },
    /// Nystrom columns: prediction is r_sel(x)^T W^{-1/2} b.
    NystromCols {
        x_sel: Array1<f64>,
        w_inv_sqrt: Array2<f64>,
        indices: Vec<usize>,
    },
    /// Random subset of representers carrying coefficient vector c.
    Subset {
        x_sel: Array1<f64>,
        indices: Vec<usize>,
    },
}

/// A fitted spline: method tag, null-space coefficients d, the method's
/// coefficient payload (full c or low-rank b), the chosen lambda, and the
/// basis handle needed for prediction.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: FitMethod,
    pub kernel: Kernel,
    pub lambda: f64,
    pub n: usize,
    pub d: Array1<f64>,
    pub coef: Array1<f64>,
    pub basis: BasisHandle,
}

impl FitResult {
    /// Rank of the approximation: K for low-rank methods, the number of
    /// representers otherwise.
    pub fn rank(&self) -> usize {
        self.coef.len()
    }
}

/// Exact smoothing spline fit at a fixed lambda.
pub fn fit_exact(data: &DataSet, kernel: &Kernel, lambda: f64) -> Result<FitResult> {
    let engine = ExactEngine::new(data, kernel)?;
    engine.fit(lambda)
}

/// Shared state for repeated exact fits and GML selection on one data set:
/// the Gram matrix, the QR factors of T, and (lazily) the eigendecomposition
/// of Q2^T Sigma Q2.
pub struct ExactEngine {
    kernel: Kernel,
    x: Array1<f64>,
    y: Array1<f64>,
    sigma: Array2<f64>,
    qr: QrFactors,
    b: Array2<f64>,
    z2: Array1<f64>,
    eig: OnceLock<(Array1<f64>, Array2<f64>)>,
}

impl ExactEngine {
    pub fn new(data: &DataSet, kernel: &Kernel) -> Result<Self> {
        let n = data.len();
        let p = kernel.null_dim();
        if n <= p {
            return Err(Error::InvalidArgument(format!(
                "need more than {p} observations, got {n}"
            )));
        }
        let xs = data.x().as_slice().expect("contiguous");
        let t = null_matrix(kernel, xs)?;
        let qr = QrFactors::new(&t)?;
        let sigma = gram_sigma(kernel, xs)?;
        let b = qr.q2t_sym_q2(&sigma);
        let z2 = qr.q2t_vec(data.y());
        Ok(ExactEngine {
            kernel: *kernel,
            x: data.x().clone(),
            y: data.y().clone(),
            sigma,
            qr,
            b,
            z2,
            eig: OnceLock::new(),
        })
    }

    pub fn qr(&self) -> &QrFactors {
        &self.qr
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    fn eig(&self) -> Result<&(Array1<f64>, Array2<f64>)> {
        if let Some(e) = self.eig.get() {
            return Ok(e);
        }
        let computed = eigh_desc(&self.b.view())?;
        let _ = self.eig.set(computed);
        Ok(self.eig.get().expect("just set"))
    }

    pub fn fit(&self, lambda: f64) -> Result<FitResult> {
        check_lambda(lambda)?;
        let n = self.y.len();
        let nl = n as f64 * lambda;
        let w = if let Some((vals, vecs)) = self.eig.get() {
            // Reuse the spectral form once GML has paid for it.
            let fz = vecs.t().dot(&self.z2);
            let scaled = Array1::from_shape_fn(fz.len(), |i| fz[i] / (vals[i].max(0.0) + nl));
            vecs.dot(&scaled)
        } else {
            let mut m = self.b.clone();
            for i in 0..m.nrows() {
                m[[i, i]] += nl;
            }
            let factor = m.factorizec(UPLO::Lower).map_err(|e| {
                Error::Numerical(format!(
                    "inner solve breakdown (penalized system not SPD): {e}"
                ))
            })?;
            factor
                .solvec(&self.z2)
                .map_err(|e| Error::Numerical(format!("inner solve failed: {e}")))?
        };
        let c = self.qr.q2_times(&w);
        let d = exact_d_from_c(&self.y, &self.sigma, &self.qr, &c, nl);
        Ok(FitResult {
            method: FitMethod::All,
            kernel: self.kernel,
            lambda,
            n,
            d,
            coef: c,
            basis: BasisHandle::Representers { x: self.x.clone() },
        })
    }

    /// GML selection over a lambda grid (with golden-section refinement).
    pub fn gml(&self, grid: &LambdaGrid) -> Result<GmlSelection> {
        let (vals, vecs) = self.eig()?;
        let fz = vecs.t().dot(&self.z2);
        let d: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
        let f2: Vec<f64> = fz.iter().map(|&v| v * v).collect();
        let n = self.y.len() as f64;
        let np = d.len() as f64;
        minimize_gml(grid, |ln_lambda| {
            let nl = n * ln_lambda.exp();
            let mut quad = 0.0;
            let mut logdet = 0.0;
            for (di, f2i) in d.iter().zip(&f2) {
                let denom = di + nl;
                quad += f2i / denom;
                logdet += denom.ln();
            }
            if quad <= 0.0 {
                return f64::INFINITY;
            }
            quad.ln() + logdet / np
        })
    }

    /// Selects lambda by GML, then fits at the selected value.
    pub fn fit_gml(&self, grid: &LambdaGrid) -> Result<(FitResult, GmlSelection)> {
        let selection = self.gml(grid)?;
        let fit = self.fit(selection.lambda)?;
        Ok((fit, selection))
    }
}

// ---------------------------------------------------------------------------
// Low-rank ridge fits
// ---------------------------------------------------------------------------

/// Minimizer of || y - T d - Z b ||^2 + n lambda || b ||^2.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub d: Array1<f64>,
    pub b: Array1<f64>,
}

/// Solves the low-rank penalized problem through its (p + K)-dimensional
/// normal equations, falling back to a QR factorization of the stacked
/// augmented system when the normal matrix is badly conditioned.
pub fn fit_lowrank(
    y: &Array1<f64>,
    t: &Array2<f64>,
    z: &Array2<f64>,
    lambda: f64,
) -> Result<RidgeFit> {
    check_lambda(lambda)?;
    let n = y.len();
    let p = t.ncols();
    let k = z.ncols();
    if t.nrows() != n || z.nrows() != n {
        return Err(Error::InvalidArgument(
            "design matrices and response have mismatched row counts".into(),
        ));
    }
    let nl = n as f64 * lambda;
    let dim = p + k;
    let mut normal = Array2::zeros((dim, dim));
    let tt = t.t().dot(t);
    normal.slice_mut(s![..p, ..p]).assign(&tt);
    if k > 0 {
        let tz = t.t().dot(z);
        let mut zz = z.t().dot(z);
        for i in 0..k {
            zz[[i, i]] += nl;
        }
        normal.slice_mut(s![..p, p..]).assign(&tz);
        normal.slice_mut(s![p.., ..p]).assign(&tz.t());
        normal.slice_mut(s![p.., p..]).assign(&zz);
    }
    let mut rhs = Array1::zeros(dim);
    rhs.slice_mut(s![..p]).assign(&t.t().dot(y));
    if k > 0 {
        rhs.slice_mut(s![p..]).assign(&z.t().dot(y));
    }

    let (evals, _) = eigh_desc(&normal.view())?;
    let max = evals[0].max(0.0);
    let min = evals[dim - 1];
    let ill_conditioned = min <= 0.0 || max / min > RIDGE_CONDITION_LIMIT;

    let solution = if ill_conditioned {
        // Stacked system [T Z; 0 sqrt(n lambda) I], rhs [y; 0].
        let mut stacked = Array2::zeros((n + k, dim));
        stacked.slice_mut(s![..n, ..p]).assign(t);
        if k > 0 {
            stacked.slice_mut(s![..n, p..]).assign(z);
            for i in 0..k {
                stacked[[n + i, p + i]] = nl.sqrt();
            }
        }
        let mut rhs_stacked = Array1::zeros(n + k);
        rhs_stacked.slice_mut(s![..n]).assign(y);
        let qr = QrFactors::new(&stacked).map_err(|e| match e {
            Error::DegenerateDesign(msg) => {
                Error::Numerical(format!("stacked ridge system is singular: {msg}"))
            }
            other => other,
        })?;
        qr.solve_r(&qr.q1t_vec(&rhs_stacked))
    } else {
        let factor = normal
            .factorizec(UPLO::Lower)
            .map_err(|e| Error::Numerical(format!("ridge normal equations failed: {e}")))?;
        factor
            .solvec(&rhs)
            .map_err(|e| Error::Numerical(format!("ridge solve failed: {e}")))?
    };
    Ok(RidgeFit {
        d: solution.slice(s![..p]).to_owned(),
        b: solution.slice(s![p..]).to_owned(),
    })
}

/// EIGEN fit through the analytic eigenbasis (periodic kernel).
pub fn fit_eigen_analytic(
    data: &DataSet,
    kernel: &Kernel,
    rank: usize,
    lambda: f64,
) -> Result<FitResult> {
    let basis = analytic_eigensystem(kernel, rank)?;
    fit_eigen_with_basis(data, &basis, lambda)
}

/// EIGEN fit through a precomputed grid cache.
pub fn fit_eigen_cached(
    data: &DataSet,
    cache: &EigenSystemCache,
    rank: usize,
    lambda: f64,
) -> Result<FitResult> {
    let basis = cache.truncated_basis(rank)?;
    fit_eigen_with_basis(data, &basis, lambda)
}

/// EIGEN fit for an already-built truncated basis.
pub fn fit_eigen_with_basis(
    data: &DataSet,
    basis: &TruncatedEigenBasis,
    lambda: f64,
) -> Result<FitResult> {
    let kernel = basis.kernel();
    let xs = data.x().as_slice().expect("contiguous");
    let t = null_matrix(&kernel, xs)?;
    let z = feature_matrix(basis, xs)?;
    let ridge = fit_lowrank(data.y(), &t, &z, lambda)?;
    let handle = basis_handle_for(basis);
    Ok(FitResult {
        method: FitMethod::Eigen,
        kernel,
        lambda,
        n: data.len(),
        d: ridge.d,
        coef: ridge.b,
        basis: handle,
    })
}

pub(crate) fn basis_handle_for(basis: &TruncatedEigenBasis) -> BasisHandle {
    match basis.grid_projection() {
        None => BasisHandle::AnalyticEigen {
            deltas: basis.deltas().clone(),
        },
        Some((s, projection)) => BasisHandle::CachedEigen {
            cache_points: s.len(),
            s,
            projection,
        },
    }
}

/// Nystrom feature construction: K kernel columns sampled uniformly
/// without replacement, orthogonalized through the pseudo-inverse square
/// root of the selected block, so that Z Z^T = C W^+ C^T.
#[derive(Debug, Clone)]
pub struct NystromFeatures {
    pub z: Array2<f64>,
    pub indices: Vec<usize>,
    pub x_sel: Array1<f64>,
    pub w_inv_sqrt: Array2<f64>,
}

pub fn nystrom_features(
    data: &DataSet,
    kernel: &Kernel,
    rank: usize,
    seed: u64,
) -> Result<NystromFeatures> {
    let n = data.len();
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!(
            "Nystrom rank must satisfy 1 <= K <= n = {n}, got {rank}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, rank).into_vec();
    indices.sort_unstable();
    let x_sel = Array1::from_iter(indices.iter().map(|&i| data.x()[i]));
    let xs = data.x().as_slice().expect("contiguous");
    let sel = x_sel.as_slice().expect("contiguous");
    let c = gram_cross(kernel, xs, sel)?;
    let w = gram_sigma(kernel, sel)?;
    let (evals, evecs) = eigh_desc(&w.view())?;
    // Random column selection often yields an ill-conditioned W; clamp tiny
    // eigenvalues out of the pseudo-inverse square root.
    let floor = 1e-10 * evals[0].max(0.0);
    let inv_sqrt = Array1::from_shape_fn(rank, |i| {
        if evals[i] > floor && evals[i] > 0.0 {
            evals[i].powf(-0.5)
        } else {
            0.0
        }
    });
    let mut scaled = evecs.clone();
    for (k, mut col) in scaled.axis_iter_mut(Axis(1)).enumerate() {
        col *= inv_sqrt[k];
    }
    let w_inv_sqrt = scaled.dot(&evecs.t());
    let z = c.dot(&w_inv_sqrt);
    Ok(NystromFeatures {
        z,
        indices,
        x_sel,
        w_inv_sqrt,
    })
}

/// Nystrom fit: low-rank ridge on the Nystrom features.
pub fn fit_nystrom(
    data: &DataSet,
    kernel: &Kernel,
    rank: usize,
    lambda: f64,
    seed: u64,
) -> Result<FitResult> {
    let features = nystrom_features(data, kernel, rank, seed)?;
    let t = null_matrix(kernel, data.x().as_slice().expect("contiguous"))?;
    let ridge = fit_lowrank(data.y(), &t, &features.z, lambda)?;
    Ok(FitResult {
        method: FitMethod::Nystrom,
        kernel: *kernel,
        lambda,
        n: data.len(),
        d: ridge.d,
        coef: ridge.b,
        basis: BasisHandle::NystromCols {
            x_sel: features.x_sel,
            w_inv_sqrt: features.w_inv_sqrt,
            indices: features.indices,
        },
    })
}

/// Fit on a random subset of q representers: minimizes
/// || y - T d - C c ||^2 + n lambda c^T W c with C the kernel columns at
/// the subset and W the corresponding square block.
pub fn fit_rsr(
    data: &DataSet,
    kernel: &Kernel,
    q: usize,
    lambda: f64,
    seed: u64,
) -> Result<FitResult> {
    check_lambda(lambda)?;
    let n = data.len();
    let p = kernel.null_dim();
    if q <= p || q > n {
        return Err(Error::InvalidArgument(format!(
            "subset size must satisfy p = {p} < q <= n = {n}, got {q}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, q).into_vec();
    indices.sort_unstable();
    let x_sel = Array1::from_iter(indices.iter().map(|&i| data.x()[i]));
    let xs = data.x().as_slice().expect("contiguous");
    let sel = x_sel.as_slice().expect("contiguous");
    let t = null_matrix(kernel, xs)?;
    let c_mat = gram_cross(kernel, xs, sel)?;
    let w = gram_sigma(kernel, sel)?;
    let nl = n as f64 * lambda;

    let assemble = |w: &Array2<f64>| {
        let dim = p + q;
        let mut normal = Array2::zeros((dim, dim));
        normal.slice_mut(s![..p, ..p]).assign(&t.t().dot(&t));
        let tc = t.t().dot(&c_mat);
        normal.slice_mut(s![..p, p..]).assign(&tc);
        normal.slice_mut(s![p.., ..p]).assign(&tc.t());
        let mut cc = c_mat.t().dot(&c_mat);
        cc.scaled_add(nl, w);
        normal.slice_mut(s![p.., p..]).assign(&cc);
        let mut rhs = Array1::zeros(dim);
        rhs.slice_mut(s![..p]).assign(&t.t().dot(data.y()));
        rhs.slice_mut(s![p..]).assign(&c_mat.t().dot(data.y()));
        (normal, rhs)
    };

    let (normal, rhs) = assemble(&w);
    let solution = match normal.factorizec(UPLO::Lower).and_then(|f| f.solvec(&rhs)) {
        Ok(sol) => sol,
        Err(_) => {
            // One jitter retry on the penalty block.
            let jitter = 1e-10 * w.diag().sum() / q as f64;
            let mut w_jittered = w.clone();
            for i in 0..q {
                w_jittered[[i, i]] += jitter;
            }
            let (normal, rhs) = assemble(&w_jittered);
            normal
                .factorizec(UPLO::Lower)
                .and_then(|f| f.solvec(&rhs))
                .map_err(|e| {
                    Error::Numerical(format!(
                        "representer-subset system singular even after jitter: {e}"
                    ))
                })?
        }
    };
    Ok(FitResult {
        method: FitMethod::Rsr,
        kernel: *kernel,
        lambda,
        n,
        d: solution.slice(s![..p]).to_owned(),
        coef: solution.slice(s![p..]).to_owned(),
        basis: BasisHandle::Subset { x_sel, indices },
    })
}

/// Evaluates a fitted spline at arbitrary points in [0, 1].
pub fn predict(fit: &FitResult, xs: &[f64]) -> Result<Array1<f64>> {
    for &x in xs {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidArgument(format!(
                "prediction point {x} is outside [0, 1]"
            )));
        }
    }
    let kernel = fit.kernel;
    let p = kernel.null_dim();
    if fit.d.len() != p {
        return Err(Error::InvalidFit(format!(
            "null-space coefficient length {} does not match the kernel (p = {p})",
            fit.d.len()
        )));
    }
    let mut out = Array1::zeros(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let mut acc = 0.0;
        for nu in 0..p {
            acc += fit.d[nu] * kernel.null_basis(nu, x);
        }
        out[i] = acc;
    }
    match &fit.basis {
        BasisHandle::Representers { x } => {
            if fit.coef.len() != x.len() {
                return Err(Error::InvalidFit(
                    "coefficient length does not match the representer set".into(),
                ));
            }
            let cross = gram_cross(&kernel, xs, x.as_slice().expect("contiguous"))?;
            out += &cross.dot(&fit.coef);
        }
        BasisHandle::AnalyticEigen { deltas } => {
            if kernel.kind() != SplineKind::Periodic {
                return Err(Error::InvalidFit(
                    "analytic eigenbasis requires the periodic kernel".into(),
                ));
            }
            if fit.coef.len() != deltas.len() {
                return Err(Error::InvalidFit(
                    "coefficient length does not match the eigenbasis rank".into(),
                ));
            }
            let basis = analytic_eigensystem(&kernel, deltas.len())?;
            let mut row = vec![0.0; deltas.len()];
            for (i, &x) in xs.iter().enumerate() {
                basis.eval_row(x, &mut row);
                let mut acc = 0.0;
                for k in 0..deltas.len() {
                    acc += deltas[k].sqrt() * fit.coef[k] * row[k];
                }
                out[i] += acc;
            }
        }
        BasisHandle::CachedEigen { s, projection, .. } => {
            if fit.coef.len() != projection.ncols() {
                return Err(Error::InvalidFit(
                    "coefficient length does not match the cached basis rank".into(),
                ));
            }
            let pv = projection.dot(&fit.coef);
            let cross = gram_cross(&kernel, xs, s.as_slice().expect("contiguous"))?;
            out += &cross.dot(&pv);
        }
        BasisHandle::NystromCols {
            x_sel, w_inv_sqrt, ..
        } => {
            if fit.coef.len() != w_inv_sqrt.ncols() {
                return Err(Error::InvalidFit(
                    "coefficient length does not match the Nystrom rank".into(),
                ));
            }
            let pv = w_inv_sqrt.dot(&fit.coef);
            let cross = gram_cross(&kernel, xs, x_sel.as_slice().expect("contiguous"))?;
            out += &cross.dot(&pv);
        }
        BasisHandle::Subset { x_sel, .. } => {
            if fit.coef.len() != x_sel.len() {
                return Err(Error::InvalidFit(
                    "coefficient length does not match the representer subset".into(),
                ));
            }
            let cross = gram_cross(&kernel, xs, x_sel.as_slice().expect("contiguous"))?;
            out += &cross.dot(&fit.coef);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// GML selection of the smoothing parameter
// ---------------------------------------------------------------------------

/// Logarithmic lambda grid for GML selection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub log10_min: f64,
    pub log10_max: f64,
    pub points: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid {
            log10_min: -12.0,
            log10_max: 0.0,
            points: 61,
        }
    }
}

impl LambdaGrid {
    pub fn lambdas(&self) -> Vec<f64> {
        let step = (self.log10_max - self.log10_min) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| 10f64.powf(self.log10_min + i as f64 * step))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.points < 2 || !(self.log10_min < self.log10_max) {
            return Err(Error::InvalidArgument(format!(
                "lambda grid needs >= 2 points and log10_min < log10_max, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Outcome of GML selection: the refined minimizer, its criterion value,
/// the grid argmin, and the full grid trace for diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmlSelection {
    pub lambda: f64,
    pub criterion: f64,
    pub grid_lambda: f64,
    pub trace: Vec<(f64, f64)>,
}

/// Grid search plus golden-section refinement of a log-criterion.
fn minimize_gml<F: Fn(f64) -> f64>(grid: &LambdaGrid, eval: F) -> Result<GmlSelection> {
    grid.validate()?;
    let lambdas = grid.lambdas();
    let mut trace = Vec::with_capacity(lambdas.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, &lam) in lambdas.iter().enumerate() {
        let v = eval(lam.ln());
        trace.push((lam, if v.is_finite() { v.exp() } else { f64::INFINITY }));
        if v.is_finite() && best.map_or(true, |(_, bv)| v < bv) {
            best = Some((i, v));
        }
    }
    let (argmin, _) = best.ok_or_else(|| {
        Error::SelectionFailure("criterion non-finite at every grid point".into())
    })?;
    let grid_lambda = lambdas[argmin];

    // Golden-section refinement inside the bracketing interval.
    let lo = lambdas[argmin.saturating_sub(1)].ln();
    let hi = lambdas[(argmin + 1).min(lambdas.len() - 1)].ln();
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - golden * (b - a);
    let mut x2 = a + golden * (b - a);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    // Relative width 1e-3 on lambda is absolute width ~1e-3 in logs.
    let tol = 1e-3;
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - golden * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + golden * (b - a);
            f2 = eval(x2);
        }
    }
    let (ln_best, f_best) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    // Keep the grid argmin if refinement did not actually improve on it.
    let grid_value = eval(grid_lambda.ln());
    let (lambda, criterion) = if f_best.is_finite() && f_best <= grid_value {
        (ln_best.exp(), f_best.exp())
    } else {
        (grid_lambda, grid_value.exp())
    };
    Ok(GmlSelection {
        lambda,
        criterion,
        grid_lambda,
        trace,
    })
}

/// Gram specification for GML: the exact dense Gram matrix or a low-rank
/// feature factor Z with implied Gram Z Z^T.
pub enum GramSpec<'a> {
    Exact(&'a Array2<f64>),
    Features(&'a Array2<f64>),
}

/// GML criterion minimization.
///
/// The criterion is z^T M^{-1} z * det(M)^{1/(n-p)} with z = Q2^T y and
/// M = Q2^T Sigma Q2 + n lambda I. The exact path eigendecomposes
/// Q2^T Sigma Q2 once; the low-rank path works through the K x K matrix
/// G^T G (G = Q2^T Z) using determinant and Woodbury identities, touching
/// nothing larger than n x K.
pub fn gml_select(
    y: &Array1<f64>,
    qr: &QrFactors,
    gram: GramSpec<'_>,
    grid: &LambdaGrid,
) -> Result<GmlSelection> {
    let n = qr.n();
    if y.len() != n {
        return Err(Error::InvalidArgument(
            "response length does not match QR factors".into(),
        ));
    }
    let p = qr.p();
    let np = (n - p) as f64;
    match gram {
        GramSpec::Exact(sigma) => {
            if sigma.dim() != (n, n) {
                return Err(Error::InvalidArgument(
                    "Gram matrix size does not match the data".into(),
                ));
            }
            let b = qr.q2t_sym_q2(sigma);
            let (vals, vecs) = eigh_desc(&b.view())?;
            let z2 = qr.q2t_vec(y);
            let fz = vecs.t().dot(&z2);
            let d: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
            let f2: Vec<f64> = fz.iter().map(|&v| v * v).collect();
            minimize_gml(grid, |ln_lambda| {
                let nl = n as f64 * ln_lambda.exp();
                let mut quad = 0.0;
                let mut logdet = 0.0;
                for (di, f2i) in d.iter().zip(&f2) {
                    let denom = di + nl;
                    quad += f2i / denom;
                    logdet += denom.ln();
                }
                if quad <= 0.0 {
                    return f64::INFINITY;
                }
                quad.ln() + logdet / np
            })
        }
        GramSpec::Features(z) => {
            if z.nrows() != n {
                return Err(Error::InvalidArgument(
                    "feature matrix row count does not match the data".into(),
                ));
            }
            let k = z.ncols();
            if k == 0 {
                return Err(Error::InvalidArgument(
                    "GML needs at least one feature column".into(),
                ));
            }
            // G^T G = Z^T Q2 Q2^T Z = Z^T Z - (Q1^T Z)^T (Q1^T Z).
            let q1tz = qr.q1().t().dot(z);
            let mut gtg = z.t().dot(z);
            gtg -= &q1tz.t().dot(&q1tz);
            let q1ty = qr.q1().t().dot(y);
            let gty = z.t().dot(y) - q1tz.t().dot(&q1ty);
            let ztz = y.dot(y) - q1ty.dot(&q1ty);
            let (mu_raw, e) = eigh_desc(&gtg.view())?;
            let mu: Vec<f64> = mu_raw.iter().map(|&v| v.max(0.0)).collect();
            let u = e.t().dot(&gty);
            let u2: Vec<f64> = u.iter().map(|&v| v * v).collect();
            let n_f = n as f64;
            let rank_limit = (n - p).min(k);
            minimize_gml(grid, move |ln_lambda| {
                let nl = n_f * ln_lambda.exp();
                let mut reduction = 0.0;
                for (mi, u2i) in mu.iter().zip(&u2) {
                    reduction += u2i / (nl + mi);
                }
                let quad = (ztz - reduction) / nl;
                if quad <= 0.0 {
                    return f64::INFINITY;
                }
                let mut logdet = 0.0;
                for &mi in mu.iter().take(rank_limit) {
                    logdet += (nl + mi).ln();
                }
                if k < n - p {
                    logdet += (n - p - k) as f64 * nl.ln();
                }
                quad.ln() + logdet / np
            })
        }
    }
}

// ---------------------------------------------------------------------------
// JSON serialization of fit results
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixJson {
    fn from_array(a: &Array2<f64>) -> Self {
        MatrixJson {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Format(format!("bad matrix payload: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum BasisJson {
    Representers {
        x: Vec<f64>,
    },
    AnalyticEigen {
        rank: usize,
    },
    CachedEigen {
        #[serde(skip_serializing_if = "Option::is_none")]
        cache: Option<String>,
        rank: usize,
        n_points: usize,
    },
    Nystrom {
        indices: Vec<usize>,
        x_sel: Vec<f64>,
        w_inv_sqrt: MatrixJson,
    },
    Subset {
        indices: Vec<usize>,
        x_sel: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct FitResultJson {
    method: FitMethod,
    kernel: Kernel,
    lambda: f64,
    n: usize,
    d: Vec<f64>,
    coef: Vec<f64>,
    basis: BasisJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    gml: Option<GmlSelection>,
}

impl FitResult {
    /// Serializes the fit to JSON. Cache-backed eigen fits store a
    /// reference to the cache file (`cache_ref`) instead of the projection
    /// matrix; the reference is recorded so prediction can reload it.
    pub fn to_json(&self, cache_ref: Option<&str>, gml: Option<&GmlSelection>) -> Result<String> {
        let basis = match &self.basis {
            BasisHandle::Representers { x } => BasisJson::Representers { x: x.to_vec() },
            BasisHandle::AnalyticEigen { deltas } => BasisJson::AnalyticEigen {
                rank: deltas.len(),
            },
            BasisHandle::CachedEigen {
                projection,
                cache_points,
                ..
            } => BasisJson::CachedEigen {
                cache: cache_ref.map(str::to_owned),
                rank: projection.ncols(),
                n_points: *cache_points,
            },
            BasisHandle::NystromCols {
                x_sel,
                w_inv_sqrt,
                indices,
            } => BasisJson::Nystrom {
                indices: indices.clone(),
                x_sel: x_sel.to_vec(),
                w_inv_sqrt: MatrixJson::from_array(w_inv_sqrt),
            },
            BasisHandle::Subset { x_sel, indices } => BasisJson::Subset {
                indices: indices.clone(),
                x_sel: x_sel.to_vec(),
            },
        };
        let json = FitResultJson {
            method: self.method,
            kernel: self.kernel,
            lambda: self.lambda,
            n: self.n,
            d: self.d.to_vec(),
            coef: self.coef.to_vec(),
            basis,
            gml: gml.cloned(),
        };
        serde_json::to_string_pretty(&json)
            .map_err(|e| Error::Format(format!("fit serialization failed: {e}")))
    }

    /// Reads a fit back from JSON. Cache-backed fits need the referenced
    /// eigensystem cache to rebuild their projection.
    pub fn from_json(text: &str, cache: Option<&EigenSystemCache>) -> Result<FitResult> {
        let json: FitResultJson = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("fit deserialization failed: {e}")))?;
        let kernel = json.kernel;
        let basis = match json.basis {
            BasisJson::Representers { x } => BasisHandle::Representers { x: Array1::from(x) },
            BasisJson::AnalyticEigen { rank } => {
                if kernel.kind() != SplineKind::Periodic {
                    return Err(Error::InvalidFit(
                        "analytic eigenbasis fit requires the periodic kernel".into(),
                    ));
                }
                BasisHandle::AnalyticEigen {
                    deltas: Array1::from_shape_fn(rank, analytic_delta),
                }
            }
            BasisJson::CachedEigen { rank, n_points, .. } => {
                let cache = cache.ok_or_else(|| {
                    Error::InvalidFit(
                        "fit references an eigensystem cache; supply the cache to load it".into(),
                    )
                })?;
                if cache.kernel() != kernel || cache.num_points() != n_points {
                    return Err(Error::InvalidFit(format!(
                        "incompatible fit/cache pairing: fit expects kernel {} with N = {n_points}, \
                         cache has kernel {} with N = {}",
                        kernel.kind().name(),
                        cache.kernel().kind().name(),
                        cache.num_points()
                    )));
                }
                let basis = cache.truncated_basis(rank)?;
                basis_handle_for(&basis)
            }
            BasisJson::Nystrom {
                indices,
                x_sel,
                w_inv_sqrt,
            } => BasisHandle::NystromCols {
                x_sel: Array1::from(x_sel),
                w_inv_sqrt: w_inv_sqrt.to_array()?,
                indices,
            },
            BasisJson::Subset { indices, x_sel } => BasisHandle::Subset {
                x_sel: Array1::from(x_sel),
                indices,
            },
        };
        Ok(FitResult {
            method: json.method,
            kernel,
            lambda: json.lambda,
            n: json.n,
            d: Array1::from(json.d),
            coef: Array1::from(json.coef),
            basis,
        })
    }

    /// Cache reference recorded in a serialized fit, if any.
    pub fn json_cache_ref(text: &str) -> Result<Option<String>> {
        let json: FitResultJson = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("fit deserialization failed: {e}")))?;
        Ok(match json.basis {
            BasisJson::CachedEigen { cache, .. } => cache,
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn toy_data(n: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let x = Array1::from_shape_fn(n, |i| (i + 1) as f64 / n as f64);
        let y = Array1::from_shape_fn(n, |i| {
            (2.0 * std::f64::consts::PI * x[i]).sin() + normal.sample(&mut rng)
        });
        DataSet::new(x, y).unwrap()
    }

    #[test]
    fn qr_reconstructs_and_is_orthogonal() {
        let data = toy_data(40, 1);
        let t = null_matrix(&Kernel::cubic(), data.x().as_slice().unwrap()).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        // T = Q1 R.
        let recon = qr.q1().dot(qr.r());
        for i in 0..40 {
            for j in 0..2 {
                assert!((recon[[i, j]] - t[[i, j]]).abs() < 1e-12);
            }
        }
        let q2 = qr.q2();
        // Q1^T Q2 = 0 and columns orthonormal.
        let cross = qr.q1().t().dot(&q2);
        assert!(cross.iter().all(|v| v.abs() < 1e-12));
        let q2tq2 = q2.t().dot(&q2);
        for i in 0..38 {
            for j in 0..38 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((q2tq2[[i, j]] - expect).abs() < 1e-12);
            }
        }
        // || Q2 ||_F^2 = n - p.
        let fro: f64 = q2.iter().map(|v| v * v).sum();
        assert!((fro - 38.0).abs() < 1e-10);
    }

    #[test]
    fn qr_sandwich_matches_explicit_product() {
        let data = toy_data(30, 2);
        let kernel = Kernel::cubic();
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let sigma = gram_sigma(&kernel, data.x().as_slice().unwrap()).unwrap();
        let fast = qr.q2t_sym_q2(&sigma);
        let q2 = qr.q2();
        let slow = q2.t().dot(&sigma).dot(&q2);
        for i in 0..28 {
            for j in 0..28 {
                assert!((fast[[i, j]] - slow[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_fit_satisfies_the_stationarity_system() {
        let data = toy_data(50, 3);
        let kernel = Kernel::cubic();
        let lambda = 1e-4;
        let fit = fit_exact(&data, &kernel, lambda).unwrap();
        let sigma = gram_sigma(&kernel, data.x().as_slice().unwrap()).unwrap();
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let nl = 50.0 * lambda;
        let residual = &t.dot(&fit.d) + &sigma.dot(&fit.coef) + &(&fit.coef * nl) - data.y();
        let c_norm = fit.coef.dot(&fit.coef).sqrt();
        let y_norm = data.y().dot(data.y()).sqrt();
        let r_norm = residual.dot(&residual).sqrt();
        assert!(
            r_norm <= 1e-6 * (y_norm + 50.0 * c_norm),
            "residual {r_norm}"
        );
        let tc = t.t().dot(&fit.coef);
        let tc_norm = tc.dot(&tc).sqrt();
        assert!(tc_norm <= 1e-6 * c_norm.max(1e-300), "T^T c = {tc_norm}");
    }

    #[test]
    fn pure_null_space_data_has_zero_c() {
        let kernel = Kernel::cubic();
        let n = 25;
        let x = Array1::from_shape_fn(n, |i| (i + 1) as f64 / n as f64);
        let d0 = [1.5, -0.7];
        let y = Array1::from_shape_fn(n, |i| d0[0] + d0[1] * (x[i] - 0.5));
        let data = DataSet::new(x, y).unwrap();
        for lambda in [1e-6, 1e-3, 10.0] {
            let fit = fit_exact(&data, &kernel, lambda).unwrap();
            let c_norm = fit.coef.dot(&fit.coef).sqrt();
            // Q2^T y vanishes only up to roundoff, which the inner solve
            // amplifies by 1/(n lambda).
            assert!(
                c_norm < 1e-13 / (n as f64 * lambda) + 1e-12,
                "lambda {lambda}: |c| = {c_norm}"
            );
            assert!((fit.d[0] - d0[0]).abs() < 1e-10);
            assert!((fit.d[1] - d0[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn huge_lambda_recovers_least_squares() {
        let data = toy_data(60, 4);
        let kernel = Kernel::cubic();
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let fit = fit_exact(&data, &kernel, 1e6).unwrap();
        // OLS on T.
        let tt = t.t().dot(&t);
        let rhs = t.t().dot(data.y());
        let ols = tt.factorizec(UPLO::Lower).unwrap().solvec(&rhs).unwrap();
        for j in 0..2 {
            assert!(
                (fit.d[j] - ols[j]).abs() < 1e-4,
                "d[{j}] = {} vs OLS {}",
                fit.d[j],
                ols[j]
            );
        }
    }

    #[test]
    fn lowrank_with_no_columns_is_ols() {
        let data = toy_data(30, 5);
        let kernel = Kernel::cubic();
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let z = Array2::zeros((30, 0));
        let ridge = fit_lowrank(data.y(), &t, &z, 0.01).unwrap();
        assert_eq!(ridge.b.len(), 0);
        let tt = t.t().dot(&t);
        let rhs = t.t().dot(data.y());
        let ols = tt.factorizec(UPLO::Lower).unwrap().solvec(&rhs).unwrap();
        for j in 0..2 {
            assert!((ridge.d[j] - ols[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn lowrank_solution_is_a_local_minimum() {
        let data = toy_data(40, 6);
        let kernel = Kernel::periodic();
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let basis = analytic_eigensystem(&kernel, 8).unwrap();
        let z = feature_matrix(&basis, data.x().as_slice().unwrap()).unwrap();
        let lambda = 1e-4;
        let ridge = fit_lowrank(data.y(), &t, &z, lambda).unwrap();
        let objective = |d: &Array1<f64>, b: &Array1<f64>| {
            let r = data.y() - &t.dot(d) - &z.dot(b);
            r.dot(&r) + 40.0 * lambda * b.dot(b)
        };
        let base = objective(&ridge.d, &ridge.b);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..20 {
            let dd = Array1::from_shape_fn(1, |_| rng.gen_range(-1e-3..1e-3));
            let db = Array1::from_shape_fn(8, |_| rng.gen_range(-1e-3..1e-3));
            let perturbed = objective(&(&ridge.d + &dd), &(&ridge.b + &db));
            assert!(perturbed >= base - 1e-12, "{perturbed} < {base}");
        }
    }

    #[test]
    fn nystrom_full_rank_is_exact() {
        let data = toy_data(30, 7);
        let kernel = Kernel::cubic();
        let f = nystrom_features(&data, &kernel, 30, 42).unwrap();
        let sigma = gram_sigma(&kernel, data.x().as_slice().unwrap()).unwrap();
        let zzt = f.z.dot(&f.z.t());
        let num: f64 = (&zzt - &sigma).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num <= 1e-6 * den, "relative error {}", num / den);
    }

    #[test]
    fn nystrom_interpolates_selected_block() {
        let data = toy_data(50, 8);
        let kernel = Kernel::cubic();
        let f = nystrom_features(&data, &kernel, 12, 9).unwrap();
        let zzt = f.z.dot(&f.z.t());
        let w = gram_sigma(&kernel, f.x_sel.as_slice().unwrap()).unwrap();
        for (a, &i) in f.indices.iter().enumerate() {
            for (b, &j) in f.indices.iter().enumerate() {
                assert!(
                    (zzt[[i, j]] - w[[a, b]]).abs() < 1e-8,
                    "block entry ({a}, {b})"
                );
            }
        }
    }

    #[test]
    fn nystrom_is_deterministic_in_the_seed() {
        let data = toy_data(40, 9);
        let kernel = Kernel::cubic();
        let f1 = nystrom_features(&data, &kernel, 10, 1234).unwrap();
        let f2 = nystrom_features(&data, &kernel, 10, 1234).unwrap();
        assert_eq!(f1.indices, f2.indices);
        assert_eq!(f1.z, f2.z);
        let f3 = nystrom_features(&data, &kernel, 10, 1235).unwrap();
        assert_ne!(f1.indices, f3.indices);
        assert!(nystrom_features(&data, &kernel, 41, 1).is_err());
    }

    #[test]
    fn rsr_pure_null_space_recovers_coefficients() {
        let kernel = Kernel::cubic();
        let n = 30;
        let x = Array1::from_shape_fn(n, |i| (i + 1) as f64 / n as f64);
        let d0 = [0.3, 2.0];
        let y = Array1::from_shape_fn(n, |i| d0[0] + d0[1] * (x[i] - 0.5));
        let data = DataSet::new(x, y).unwrap();
        let fit = fit_rsr(&data, &kernel, 10, 1e-3, 5).unwrap();
        let c_norm = fit.coef.dot(&fit.coef).sqrt();
        assert!(c_norm < 1e-8, "|c| = {c_norm}");
        assert!((fit.d[0] - d0[0]).abs() < 1e-8);
        assert!((fit.d[1] - d0[1]).abs() < 1e-8);
        assert!(fit_rsr(&data, &kernel, 2, 1e-3, 5).is_err());
        assert!(fit_rsr(&data, &kernel, 31, 1e-3, 5).is_err());
    }

    #[test]
    fn predict_at_design_matches_fitted_values() {
        let data = toy_data(35, 10);
        let kernel = Kernel::cubic();
        let fit = fit_exact(&data, &kernel, 1e-4).unwrap();
        let sigma = gram_sigma(&kernel, data.x().as_slice().unwrap()).unwrap();
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let fitted = &t.dot(&fit.d) + &sigma.dot(&fit.coef);
        let predicted = predict(&fit, data.x().as_slice().unwrap()).unwrap();
        for i in 0..35 {
            assert!((fitted[i] - predicted[i]).abs() < 1e-10);
        }
        assert!(predict(&fit, &[1.3]).is_err());
    }

    #[test]
    fn gml_scale_invariance() {
        let data = toy_data(40, 11);
        let kernel = Kernel::cubic();
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let sigma = gram_sigma(&kernel, data.x().as_slice().unwrap()).unwrap();
        let grid = LambdaGrid {
            log10_min: -8.0,
            log10_max: -1.0,
            points: 15,
        };
        let base = gml_select(data.y(), &qr, GramSpec::Exact(&sigma), &grid).unwrap();
        let scaled_y = data.y() * 3.0;
        let scaled = gml_select(&scaled_y, &qr, GramSpec::Exact(&sigma), &grid).unwrap();
        assert!(
            ((base.lambda - scaled.lambda) / base.lambda).abs() < 1e-6,
            "{} vs {}",
            base.lambda,
            scaled.lambda
        );
        for ((l1, v1), (l2, v2)) in base.trace.iter().zip(&scaled.trace) {
            assert_eq!(l1, l2);
            assert!((v2 / v1 - 9.0).abs() < 1e-8, "scaling at lambda {l1}");
        }
    }

    #[test]
    fn fit_json_round_trip() {
        let data = toy_data(20, 12);
        let kernel = Kernel::periodic();
        let fit = fit_eigen_analytic(&data, &kernel, 6, 1e-4).unwrap();
        let json = fit.to_json(None, None).unwrap();
        let restored = FitResult::from_json(&json, None).unwrap();
        assert_eq!(restored.coef, fit.coef);
        assert_eq!(restored.d, fit.d);
        let grid: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let p1 = predict(&fit, &grid).unwrap();
        let p2 = predict(&restored, &grid).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn cached_fit_json_requires_cache() {
        let data = toy_data(20, 13);
        let cache = crate::eigensys::precompute_cache(&Kernel::cubic(), 30).unwrap();
        let fit = fit_eigen_cached(&data, &cache, 5, 1e-4).unwrap();
        let json = fit.to_json(Some("cache.eig"), None).unwrap();
        assert!(FitResult::from_json(&json, None).is_err());
        let restored = FitResult::from_json(&json, Some(&cache)).unwrap();
        let grid: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let p1 = predict(&fit, &grid).unwrap();
        let p2 = predict(&restored, &grid).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Mismatched cache is rejected.
        let other = crate::eigensys::precompute_cache(&Kernel::cubic(), 31).unwrap();
        assert!(FitResult::from_json(&json, Some(&other)).is_err());
    }
}
