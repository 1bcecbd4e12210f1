//! Computable error budgets for the low-rank approximations.
//!
//! Two layers of approximation are bounded. Truncating the eigenbasis at
//! rank K perturbs the Gram matrix from S to S~, and the resulting drift of
//! the fitted coefficients and of the fitted function is controlled by
//! norms of S~ - S together with spectral sums of the eigenvalues (the
//! rank-K head C_K and the tail D_K). Approximating the truncated
//! eigensystem itself on a point grid perturbs S~ further to S^, and the
//! additional error is controlled by eigenvalue and eigenfunction
//! differences between the analytic and grid systems.
//!
//! One deliberate departure from the bound statements: the eigenvalue sums
//! B = sum lambda_k^{-2} are infinite whenever the truncated Gram is rank
//! deficient, which is always the case for K < n - p. The implementation
//! therefore evaluates the regularized sums sum (lambda_k + n lambda)^{-2}
//! (finite for lambda > 0, and exactly the quantity the derivation uses
//! before its final relaxation). Both versions are reported; only the
//! regularized one enters the evaluated bounds.

use ndarray::prelude::*;
use ndarray_linalg::SVD;
use serde::Serialize;

use crate::eigensys::{feature_matrix, EigenSystemCache, TruncatedEigenBasis};
use crate::kernels::{Kernel, SplineKind};
use crate::linalg::{eigh_desc, trapezoid_sum, unit_grid};
use crate::solvers::{basis_handle_for, BasisHandle, FitMethod, FitResult, GramFit, QrFactors};
use crate::{Error, Result};

/// Quadrature resolution for function-space norms.
pub const DEFAULT_QUADRATURE_NODES: usize = 10_001;

/// Relative eigenvalue gap below which modes are treated as one
/// degenerate cluster.
const CLUSTER_GAP_REL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Lifting coefficient fits into predictable fit results
// ---------------------------------------------------------------------------

/// Wraps an exact-Gram coefficient fit as a predictable fit result.
pub fn exact_fit_result(kernel: &Kernel, xs: &Array1<f64>, fit: &GramFit) -> FitResult {
    FitResult {
        method: FitMethod::All,
        kernel: *kernel,
        lambda: fit.lambda,
        n: xs.len(),
        d: fit.d.clone(),
        coef: fit.c.clone(),
        basis: BasisHandle::Representers { x: xs.clone() },
    }
}

/// Wraps a coefficient fit computed against a rank-K Gram approximation as
/// a predictable fit result (spectral coefficients b = Z^T c).
pub fn eigen_fit_result(
    basis: &TruncatedEigenBasis,
    xs: &[f64],
    fit: &GramFit,
) -> Result<FitResult> {
    let z = feature_matrix(basis, xs)?;
    let b = z.t().dot(&fit.c);
    Ok(FitResult {
        method: FitMethod::Eigen,
        kernel: basis.kernel(),
        lambda: fit.lambda,
        n: xs.len(),
        d: fit.d.clone(),
        coef: b,
        basis: basis_handle_for(basis),
    })
}

// ---------------------------------------------------------------------------
// Observed errors
// ---------------------------------------------------------------------------

/// Left-hand sides of the bound inequalities, measured directly.
#[derive(Debug, Clone, Serialize)]
pub struct ObservedErrors {
    /// Squared L2 distance between the two fitted functions on [0, 1].
    pub l2_sq_f: f64,
    /// Squared L2 distance between the null-space components.
    pub l2_sq_f0: f64,
    /// Squared L2 distance between the penalized components.
    pub l2_sq_f1: f64,
    /// Squared Euclidean distance between null-space coefficient vectors.
    pub d_dist_sq: f64,
    /// Squared distance between full coefficient vectors, when both fits
    /// carry length-n coefficients.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_dist_sq: Option<f64>,
}

/// Measures the function-space and coefficient distances between two fits
/// on the same data. The component split uses each fit's null-space part
/// against the remainder.
pub fn observed_errors(
    fit_a: &FitResult,
    fit_b: &FitResult,
    quadrature_nodes: usize,
) -> Result<ObservedErrors> {
    if fit_a.kernel != fit_b.kernel || fit_a.n != fit_b.n {
        return Err(Error::InvalidArgument(
            "observed_errors requires fits on identical data".into(),
        ));
    }
    if fit_a.lambda != fit_b.lambda {
        return Err(Error::InvalidArgument(format!(
            "observed_errors requires a shared smoothing parameter, got {} and {}",
            fit_a.lambda, fit_b.lambda
        )));
    }
    let grid = unit_grid(quadrature_nodes.max(3));
    let step = 1.0 / (grid.len() - 1) as f64;
    let xs = grid.as_slice().expect("contiguous");
    let fa = crate::solvers::predict(fit_a, xs)?;
    let fb = crate::solvers::predict(fit_b, xs)?;
    let kernel = fit_a.kernel;
    let p = kernel.null_dim();
    let null_part = |fit: &FitResult, x: f64| -> f64 {
        (0..p).map(|nu| fit.d[nu] * kernel.null_basis(nu, x)).sum()
    };
    let mut sq_f = Vec::with_capacity(grid.len());
    let mut sq_f0 = Vec::with_capacity(grid.len());
    let mut sq_f1 = Vec::with_capacity(grid.len());
    for (i, &x) in grid.iter().enumerate() {
        let f0a = null_part(fit_a, x);
        let f0b = null_part(fit_b, x);
        let f1a = fa[i] - f0a;
        let f1b = fb[i] - f0b;
        sq_f.push((fa[i] - fb[i]) * (fa[i] - fb[i]));
        sq_f0.push((f0a - f0b) * (f0a - f0b));
        sq_f1.push((f1a - f1b) * (f1a - f1b));
    }
    let d_diff = &fit_a.d - &fit_b.d;
    let c_dist_sq = match (&fit_a.basis, &fit_b.basis) {
        (BasisHandle::Representers { .. }, BasisHandle::Representers { .. })
            if fit_a.coef.len() == fit_b.coef.len() =>
        {
            let diff = &fit_a.coef - &fit_b.coef;
            Some(diff.dot(&diff))
        }
        _ => None,
    };
    Ok(ObservedErrors {
        l2_sq_f: trapezoid_sum(&sq_f, step),
        l2_sq_f0: trapezoid_sum(&sq_f0, step),
        l2_sq_f1: trapezoid_sum(&sq_f1, step),
        d_dist_sq: d_diff.dot(&d_diff),
        c_dist_sq,
    })
}

// ---------------------------------------------------------------------------
// Shared spectral quantities
// ---------------------------------------------------------------------------

fn frob_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn frob_diff_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Eigenvalues of Q2^T S Q2 plus the raw and regularized inverse-square
/// sums built from them.
struct BSums {
    eigenvalues: Vec<f64>,
    raw: Option<f64>,
    regularized: f64,
}

fn b_sums(qr: &QrFactors, sigma: &Array2<f64>, n_lambda: f64) -> Result<BSums> {
    let block = qr.q2t_sym_q2(sigma);
    let (vals, _) = eigh_desc(&block.view())?;
    let eigenvalues: Vec<f64> = vals.to_vec();
    let mut raw = 0.0;
    let mut raw_finite = true;
    let mut regularized = 0.0;
    for &v in &eigenvalues {
        if v <= 0.0 {
            raw_finite = false;
        } else {
            raw += v.powi(-2);
        }
        regularized += (v.max(0.0) + n_lambda).powi(-2);
    }
    Ok(BSums {
        eigenvalues,
        raw: if raw_finite { Some(raw) } else { None },
        regularized,
    })
}

/// zeta1 = ||Q2||_F^6 ||Q2^T y||^2 = (n - p)^3 ||Q2^T y||^2.
fn zeta1(qr: &QrFactors, y: &Array1<f64>) -> f64 {
    let z2 = qr.q2t_vec(y);
    ((qr.n() - qr.p()) as f64).powi(3) * z2.dot(&z2)
}

/// Largest eigenvalue of A = T (T^T T)^{-2} T^T, which is 1/sigma_min(T)^2.
fn lambda_max_a(qr: &QrFactors) -> f64 {
    let smin = qr.sigma_min();
    smin.powi(-2)
}

/// Closed tail summation sum_{k > rank} delta_k^2 for the periodic
/// eigenvalues delta_k = (2 pi ceil(k/2))^{-4}.
pub fn analytic_tail_dk(rank: usize) -> f64 {
    let mut sum = 0.0;
    let mut k = rank + 1;
    loop {
        let nu = (k + 1) / 2;
        let term = (2.0 * std::f64::consts::PI * nu as f64).powi(-8);
        sum += term;
        k += 1;
        if k > rank + 200 && term <= 1e-12 * sum {
            break;
        }
    }
    sum
}

/// Tail estimate for a grid eigensystem: fits delta_k ~ c k^{-4} on the
/// last ten positive modes and sums the implied squared tail.
fn power_law_tail_dk(cache: &EigenSystemCache, rank: usize) -> f64 {
    let positive = cache.positive_modes();
    let lo = positive.saturating_sub(10);
    let mut scale = 0.0;
    let mut count = 0;
    for k in lo..positive {
        let delta = cache.delta(k);
        scale += delta * ((k + 1) as f64).powi(4);
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    scale /= count as f64;
    let mut sum = 0.0;
    let mut k = rank + 1;
    loop {
        let term = (scale * (k as f64).powi(-4)).powi(2);
        sum += term;
        k += 1;
        if k > rank + 200 && term <= 1e-12 * sum.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    sum
}

// ---------------------------------------------------------------------------
// Bound reports
// ---------------------------------------------------------------------------

/// Coefficient-level bounds: ||c~ - c||^2 and ||d~ - d||^2 against the
/// Gram perturbation.
#[derive(Debug, Clone, Serialize)]
pub struct CoefficientBounds {
    pub zeta1: f64,
    pub zeta2: f64,
    pub lambda_max_a: f64,
    pub b_exact_regularized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_exact_raw: Option<f64>,
    pub b_tilde_regularized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_tilde_raw: Option<f64>,
    pub sigma_diff_frob_sq: f64,
    pub sigma_tilde_frob_sq: f64,
    /// Upper bound on ||c~ - c||^2.
    pub c_bound: f64,
    /// Upper bound on ||d~ - d||^2.
    pub d_bound: f64,
}

/// Coefficient-error bounds for a truncated fit against the exact fit
/// sharing the same data and lambda.
pub fn coefficient_bounds(
    exact: &GramFit,
    truncated: &GramFit,
    sigma: &Array2<f64>,
    sigma_tilde: &Array2<f64>,
    qr: &QrFactors,
    y: &Array1<f64>,
) -> Result<CoefficientBounds> {
    if exact.lambda != truncated.lambda {
        return Err(Error::InvalidArgument(format!(
            "bounds require a shared lambda, got {} and {}",
            exact.lambda, truncated.lambda
        )));
    }
    let n = qr.n();
    let nl = n as f64 * exact.lambda;
    let z1 = zeta1(qr, y);
    let b_exact = b_sums(qr, sigma, nl)?;
    let b_tilde = b_sums(qr, sigma_tilde, nl)?;
    let diff = frob_diff_sq(sigma_tilde, sigma);
    let tilde_sq = frob_sq(sigma_tilde);
    let lam_a = lambda_max_a(qr);
    let c_norm_sq = exact.c.dot(&exact.c);
    let bb = b_exact.regularized * b_tilde.regularized;
    let zeta2 = 2.0 * lam_a * (z1 * bb * tilde_sq + c_norm_sq);
    Ok(CoefficientBounds {
        zeta1: z1,
        zeta2,
        lambda_max_a: lam_a,
        b_exact_regularized: b_exact.regularized,
        b_exact_raw: b_exact.raw,
        b_tilde_regularized: b_tilde.regularized,
        b_tilde_raw: b_tilde.raw,
        sigma_diff_frob_sq: diff,
        sigma_tilde_frob_sq: tilde_sq,
        c_bound: z1 * bb * diff,
        d_bound: zeta2 * diff,
    })
}

/// Every quantity entering the function-space bounds, for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    /// 1 for the eigenbasis-truncation stage, 2 for the grid-approximation
    /// stage.
    pub stage: u8,
    pub n: usize,
    pub p: usize,
    pub rank: usize,
    pub lambda: f64,
    pub zeta1: f64,
    pub lambda_max_a: f64,
    /// Eigenvalues of Q2^T S Q2 for this stage's reference Gram (the exact
    /// Gram at stage 1, the truncated Gram at stage 2).
    pub reference_eigenvalues: Vec<f64>,
    /// Eigenvalues of Q2^T S Q2 for the approximating Gram.
    pub approx_eigenvalues: Vec<f64>,
    pub b_reference_regularized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_reference_raw: Option<f64>,
    pub b_approx_regularized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_approx_raw: Option<f64>,
    /// Head sum of squared analytic eigenvalues, C_K.
    pub c_k: f64,
    /// Tail sum of squared eigenvalues past the rank, D_K (stage 1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_k: Option<f64>,
    /// Set when D_K came from a fitted power-law tail instead of a closed
    /// form; estimated tails are reported but never validity-tested.
    pub d_k_is_estimate: bool,
    /// Head sum of squared grid eigenvalues, C'_K (stage 2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_k_prime: Option<f64>,
    pub kappa: f64,
    pub kappa_is_analytic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_prime: Option<f64>,
    /// || S_approx - S_reference ||_F^2 for this stage's Gram pair.
    pub sigma_diff_frob_sq: f64,
    /// || S~ ||_F^2.
    pub sigma_tilde_frob_sq: f64,
    /// Squared norm of the reference coefficient vector (c at stage 1,
    /// c~ at stage 2).
    pub reference_coef_sq: f64,
    /// Squared norm of the approximating coefficient vector (c~ or c^).
    pub approx_coef_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta2_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta3_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta4: Option<f64>,
    /// Per-mode squared L2 eigenfunction differences (stage 2, after
    /// subspace alignment inside degenerate clusters).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_diff_l2_sq: Option<Vec<f64>>,
    /// Per-mode delta_k^2-weighted squared differences of the evaluation
    /// functionals at the design points (stage 2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub li_phi_diff_weighted: Option<Vec<f64>>,
    /// Per-mode squared eigenvalue differences (stage 2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_diff_sq: Option<Vec<f64>>,
    /// Degenerate clusters (0-based start, exclusive end) whose
    /// eigenfunction comparison used subspace alignment.
    pub degenerate_clusters: Vec<(usize, usize)>,
    /// Bound on the squared L2 distance of the null-space components.
    pub bound_f0: f64,
    /// Bound on the squared L2 distance of the penalized components.
    pub bound_f1: f64,
    /// Bound on the squared L2 distance of the full fits.
    pub bound_f: f64,
    /// Bound on the squared coefficient distance.
    pub coef_c_bound: f64,
    /// Chain bound against the exact fit, 2 * bound_f + 2 * (truncation
    /// bound), when the truncation-stage bound was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined_bound_vs_exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed: Option<ObservedErrors>,
}

impl BoundReport {
    /// Attaches measured errors for validity reporting.
    pub fn with_observed(mut self, observed: ObservedErrors) -> Self {
        self.observed = Some(observed);
        self
    }

    /// Whether every observed distance sits below its bound. `None` when
    /// no observations are attached.
    pub fn is_valid(&self) -> Option<bool> {
        self.observed.as_ref().map(|o| {
            o.l2_sq_f <= self.bound_f
                && o.l2_sq_f0 <= self.bound_f0
                && o.l2_sq_f1 <= self.bound_f1
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("bound report serialization failed: {e}")))
    }

    /// Header for the validity-sweep CSV.
    pub fn csv_header() -> &'static str {
        "instance,stage,n,rank,lambda,bound_f0,bound_f1,bound_f,observed_f0,observed_f1,observed_f,valid"
    }

    /// One validity-sweep CSV row; observation fields are empty when no
    /// observed errors are attached.
    pub fn csv_row(&self, instance: &str) -> String {
        match &self.observed {
            Some(o) => format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                instance,
                self.stage,
                self.n,
                self.rank,
                self.lambda,
                self.bound_f0,
                self.bound_f1,
                self.bound_f,
                o.l2_sq_f0,
                o.l2_sq_f1,
                o.l2_sq_f,
                self.is_valid().unwrap_or(false)
            ),
            None => format!(
                "{},{},{},{},{},{},{},{},,,,",
                instance,
                self.stage,
                self.n,
                self.rank,
                self.lambda,
                self.bound_f0,
                self.bound_f1,
                self.bound_f
            ),
        }
    }
}

/// Envelope constant for |L_i Phi_k|: the exact analytic value sqrt(2) for
/// the periodic eigensystem, otherwise the empirical maximum over the
/// computed modes at the design points (flagged, since the bound
/// derivations assume an envelope over all modes).
fn kappa_for(basis: &TruncatedEigenBasis, xs: &[f64]) -> (f64, bool) {
    if basis.is_analytic() && basis.kernel().kind() == SplineKind::Periodic {
        (std::f64::consts::SQRT_2, true)
    } else {
        let mut max = 0.0f64;
        let mut row = vec![0.0; basis.rank()];
        for &x in xs {
            basis.eval_row(x, &mut row);
            for &v in &row {
                max = max.max(v.abs());
            }
        }
        (max, false)
    }
}

/// Function-space bounds for the rank-K truncation against the exact fit.
///
/// `tail_cache` supplies the eigenvalue tail rule when the basis is not
/// analytic; for the analytic periodic basis the tail is a closed
/// summation.
#[allow(clippy::too_many_arguments)]
pub fn truncation_bounds(
    exact: &GramFit,
    truncated: &GramFit,
    basis: &TruncatedEigenBasis,
    sigma: &Array2<f64>,
    sigma_tilde: &Array2<f64>,
    qr: &QrFactors,
    y: &Array1<f64>,
    xs: &[f64],
    tail_cache: Option<&EigenSystemCache>,
) -> Result<BoundReport> {
    let coef = coefficient_bounds(exact, truncated, sigma, sigma_tilde, qr, y)?;
    let n = qr.n();
    let p = qr.p();
    let rank = basis.rank();
    let nl = n as f64 * exact.lambda;
    let b_exact = b_sums(qr, sigma, nl)?;
    let b_tilde = b_sums(qr, sigma_tilde, nl)?;
    let (kappa, kappa_is_analytic) = kappa_for(basis, xs);
    let c_k: f64 = basis.deltas().iter().map(|d| d * d).sum();
    let (d_k, d_k_is_estimate) = if basis.is_analytic() {
        (analytic_tail_dk(rank), false)
    } else {
        match tail_cache {
            Some(cache) => (power_law_tail_dk(cache, rank), true),
            None => {
                return Err(Error::InvalidArgument(
                    "no tail rule for D_K: a non-analytic eigensystem needs its cache \
                     for the power-law tail estimate"
                        .into(),
                ))
            }
        }
    };
    let c_norm_sq = exact.c.dot(&exact.c);
    let bb = b_exact.regularized * b_tilde.regularized;
    let zeta3 = n as f64 * kappa * kappa * c_k * coef.zeta1 * bb;
    let diff = coef.sigma_diff_frob_sq;
    let tail_term = n as f64 * kappa * kappa * c_norm_sq * d_k;
    Ok(BoundReport {
        stage: 1,
        n,
        p,
        rank,
        lambda: exact.lambda,
        zeta1: coef.zeta1,
        lambda_max_a: coef.lambda_max_a,
        reference_eigenvalues: b_exact.eigenvalues,
        approx_eigenvalues: b_tilde.eigenvalues,
        b_reference_regularized: b_exact.regularized,
        b_reference_raw: b_exact.raw,
        b_approx_regularized: b_tilde.regularized,
        b_approx_raw: b_tilde.raw,
        c_k,
        d_k: Some(d_k),
        d_k_is_estimate,
        c_k_prime: None,
        kappa,
        kappa_is_analytic,
        kappa_prime: None,
        sigma_diff_frob_sq: diff,
        sigma_tilde_frob_sq: coef.sigma_tilde_frob_sq,
        reference_coef_sq: c_norm_sq,
        approx_coef_sq: truncated.c.dot(&truncated.c),
        zeta2: Some(coef.zeta2),
        zeta3: Some(zeta3),
        zeta2_prime: None,
        zeta3_prime: None,
        zeta4: None,
        phi_diff_l2_sq: None,
        li_phi_diff_weighted: None,
        delta_diff_sq: None,
        degenerate_clusters: Vec::new(),
        bound_f0: coef.zeta2 * diff,
        bound_f1: zeta3 * diff + tail_term,
        bound_f: 2.0 * (coef.zeta2 + zeta3) * diff + 2.0 * tail_term,
        coef_c_bound: coef.c_bound,
        combined_bound_vs_exact: None,
        observed: None,
    })
}

/// Clusters of (0-based) mode indices whose eigenvalues coincide up to a
/// relative gap.
fn eigenvalue_clusters(deltas: &Array1<f64>) -> Vec<(usize, usize)> {
    let mut clusters = Vec::new();
    let mut start = 0;
    for k in 1..=deltas.len() {
        let split = k == deltas.len() || {
            let a = deltas[k - 1];
            let b = deltas[k];
            (a - b).abs() > CLUSTER_GAP_REL * a.abs().max(b.abs())
        };
        if split {
            clusters.push((start, k));
            start = k;
        }
    }
    clusters
}

/// Function-space bounds for the grid approximation of the truncated
/// eigenspace: the grid-backed fit against the analytic truncated fit.
///
/// Inside exactly degenerate eigenvalue clusters the analytic
/// eigenfunctions are rotated onto the grid ones (orthogonal Procrustes on
/// the cluster's cross-Gram) before any difference is measured; individual
/// eigenfunctions are not identifiable there and every rotation is an
/// equally valid eigenbasis. Affected clusters are flagged in the report.
///
/// `truncation_bound_f`, when given, yields the chained bound against the
/// exact fit.
#[allow(clippy::too_many_arguments)]
pub fn grid_bounds(
    truncated: &GramFit,
    cached: &GramFit,
    analytic_basis: &TruncatedEigenBasis,
    cache: &EigenSystemCache,
    sigma_tilde: &Array2<f64>,
    sigma_check: &Array2<f64>,
    qr: &QrFactors,
    y: &Array1<f64>,
    xs: &[f64],
    quadrature_nodes: usize,
    truncation_bound_f: Option<f64>,
) -> Result<BoundReport> {
    if !(analytic_basis.is_analytic()
        && analytic_basis.kernel().kind() == SplineKind::Periodic)
    {
        return Err(Error::UnsupportedKernel {
            required: "periodic",
            got: analytic_basis.kernel().kind().name().to_string(),
        });
    }
    if truncated.lambda != cached.lambda {
        return Err(Error::InvalidArgument(format!(
            "bounds require a shared lambda, got {} and {}",
            truncated.lambda, cached.lambda
        )));
    }
    let rank = analytic_basis.rank();
    let grid_basis = cache.truncated_basis(rank)?;
    let n = qr.n();
    let p = qr.p();
    let nl = n as f64 * truncated.lambda;
    let z1 = zeta1(qr, y);
    let lam_a = lambda_max_a(qr);
    let b_tilde = b_sums(qr, sigma_tilde, nl)?;
    let b_check = b_sums(qr, sigma_check, nl)?;
    let diff = frob_diff_sq(sigma_check, sigma_tilde);
    let tilde_sq = frob_sq(sigma_tilde);
    let (kappa, kappa_is_analytic) = kappa_for(analytic_basis, xs);
    let (kappa_prime, _) = kappa_for(&grid_basis, xs);
    let c_k: f64 = analytic_basis.deltas().iter().map(|d| d * d).sum();
    let c_k_prime: f64 = grid_basis.deltas().iter().map(|d| d * d).sum();
    let c_tilde_sq = truncated.c.dot(&truncated.c);
    let c_check_sq = cached.c.dot(&cached.c);

    let bb = b_tilde.regularized * b_check.regularized;
    let zeta2p = 2.0 * lam_a * (z1 * bb * tilde_sq + c_tilde_sq);
    let zeta3p = n as f64 * kappa * kappa * c_k * z1 * bb;
    let zeta4 = c_check_sq * n as f64 * kappa_prime * kappa_prime * c_k_prime;

    // Eigenfunction differences on the quadrature grid, with per-cluster
    // alignment of the analytic basis onto the grid one.
    let grid = unit_grid(quadrature_nodes.max(3));
    let step = 1.0 / (grid.len() - 1) as f64;
    let gx = grid.as_slice().expect("contiguous");
    // Columns of the feature matrices are sqrt(delta_k) phi_k; rescale to
    // recover the eigenfunctions themselves.
    let phi_grid_analytic = {
        let mut z = feature_matrix(analytic_basis, gx)?;
        for (k, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            col /= analytic_basis.delta(k).sqrt();
        }
        z
    };
    let phi_grid_cache = {
        let mut z = feature_matrix(&grid_basis, gx)?;
        for (k, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            col /= grid_basis.delta(k).sqrt();
        }
        z
    };
    let phi_design_analytic = {
        let mut z = feature_matrix(analytic_basis, xs)?;
        for (k, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            col /= analytic_basis.delta(k).sqrt();
        }
        z
    };
    let phi_design_cache = {
        let mut z = feature_matrix(&grid_basis, xs)?;
        for (k, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            col /= grid_basis.delta(k).sqrt();
        }
        z
    };

    let clusters = eigenvalue_clusters(analytic_basis.deltas());
    let mut aligned_grid_cols = phi_grid_analytic.clone();
    let mut aligned_design_cols = phi_design_analytic.clone();
    let mut flagged = Vec::new();
    for &(lo, hi) in &clusters {
        let width = hi - lo;
        if width < 2 {
            // Still align the sign of isolated (or truncated-pair) modes.
            let mut ip = 0.0;
            for i in 0..grid.len() {
                ip += phi_grid_cache[[i, lo]] * phi_grid_analytic[[i, lo]];
            }
            if ip < 0.0 {
                for i in 0..grid.len() {
                    aligned_grid_cols[[i, lo]] = -phi_grid_analytic[[i, lo]];
                }
                for i in 0..xs.len() {
                    aligned_design_cols[[i, lo]] = -phi_design_analytic[[i, lo]];
                }
            }
            continue;
        }
        flagged.push((lo, hi));
        // Cross-Gram X[a][b] = <phi_cache_a, phi_analytic_b> by quadrature.
        let mut x = Array2::zeros((width, width));
        for a in 0..width {
            for b in 0..width {
                let vals: Vec<f64> = (0..grid.len())
                    .map(|i| phi_grid_cache[[i, lo + a]] * phi_grid_analytic[[i, lo + b]])
                    .collect();
                x[[a, b]] = trapezoid_sum(&vals, step);
            }
        }
        let (u, _s, vt) = x
            .svd(true, true)
            .map_err(|e| Error::Numerical(format!("cluster alignment SVD failed: {e}")))?;
        let rotation = u.unwrap().dot(&vt.unwrap());
        // Aligned analytic functions psi_a = sum_b rotation[a][b] phi_b.
        for a in 0..width {
            for i in 0..grid.len() {
                let mut acc = 0.0;
                for b in 0..width {
                    acc += rotation[[a, b]] * phi_grid_analytic[[i, lo + b]];
                }
                aligned_grid_cols[[i, lo + a]] = acc;
            }
            for i in 0..xs.len() {
                let mut acc = 0.0;
                for b in 0..width {
                    acc += rotation[[a, b]] * phi_design_analytic[[i, lo + b]];
                }
                aligned_design_cols[[i, lo + a]] = acc;
            }
        }
    }

    let mut phi_diff_l2_sq = Vec::with_capacity(rank);
    let mut li_phi_diff_weighted = Vec::with_capacity(rank);
    let mut delta_diff_sq = Vec::with_capacity(rank);
    for k in 0..rank {
        let sq: Vec<f64> = (0..grid.len())
            .map(|i| {
                let dphi = phi_grid_cache[[i, k]] - aligned_grid_cols[[i, k]];
                dphi * dphi
            })
            .collect();
        phi_diff_l2_sq.push(trapezoid_sum(&sq, step));
        let design_sq: f64 = (0..xs.len())
            .map(|i| {
                let dphi = phi_design_cache[[i, k]] - aligned_design_cols[[i, k]];
                dphi * dphi
            })
            .sum();
        let dd = grid_basis.delta(k);
        li_phi_diff_weighted.push(dd * dd * design_sq);
        let ddelta = grid_basis.delta(k) - analytic_basis.delta(k);
        delta_diff_sq.push(ddelta * ddelta);
    }
    let phi_sum: f64 = phi_diff_l2_sq.iter().sum();
    let li_sum: f64 = li_phi_diff_weighted.iter().sum();
    let delta_sum: f64 = delta_diff_sq.iter().sum();

    let nk2c = n as f64 * kappa * kappa * c_check_sq;
    let bound_f1 =
        2.0 * zeta4 * phi_sum + 6.0 * c_check_sq * li_sum + 6.0 * nk2c * delta_sum
            + 6.0 * zeta3p * diff;
    let bound_f = 4.0 * zeta4 * phi_sum
        + 12.0 * c_check_sq * li_sum
        + 12.0 * nk2c * delta_sum
        + (12.0 * zeta3p + 2.0 * zeta2p) * diff;
    let bound_f0 = zeta2p * diff;

    Ok(BoundReport {
        stage: 2,
        n,
        p,
        rank,
        lambda: truncated.lambda,
        zeta1: z1,
        lambda_max_a: lam_a,
        reference_eigenvalues: b_tilde.eigenvalues,
        approx_eigenvalues: b_check.eigenvalues,
        b_reference_regularized: b_tilde.regularized,
        b_reference_raw: b_tilde.raw,
        b_approx_regularized: b_check.regularized,
        b_approx_raw: b_check.raw,
        c_k,
        d_k: None,
        d_k_is_estimate: false,
        c_k_prime: Some(c_k_prime),
        kappa,
        kappa_is_analytic,
        kappa_prime: Some(kappa_prime),
        sigma_diff_frob_sq: diff,
        sigma_tilde_frob_sq: tilde_sq,
        reference_coef_sq: c_tilde_sq,
        approx_coef_sq: c_check_sq,
        zeta2: None,
        zeta3: None,
        zeta2_prime: Some(zeta2p),
        zeta3_prime: Some(zeta3p),
        zeta4: Some(zeta4),
        phi_diff_l2_sq: Some(phi_diff_l2_sq),
        li_phi_diff_weighted: Some(li_phi_diff_weighted),
        delta_diff_sq: Some(delta_diff_sq),
        degenerate_clusters: flagged,
        bound_f0,
        bound_f1,
        bound_f,
        coef_c_bound: z1 * bb * diff,
        combined_bound_vs_exact: truncation_bound_f.map(|t1| 2.0 * bound_f + 2.0 * t1),
        observed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigensys::analytic_eigensystem;
    use crate::kernels::{gram_sigma, null_matrix, DataSet};
    use crate::solvers::fit_with_gram;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    fn periodic_instance(n: usize, seed: u64) -> (DataSet, Kernel) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let x = Array1::from_shape_fn(n, |i| (i + 1) as f64 / n as f64);
        let y = Array1::from_shape_fn(n, |i| {
            (2.0 * std::f64::consts::PI * x[i]).sin()
                + 0.5 * (4.0 * std::f64::consts::PI * x[i]).cos()
                + normal.sample(&mut rng)
        });
        (DataSet::new(x, y).unwrap(), Kernel::periodic())
    }

    #[test]
    fn zeta1_identity() {
        // (n - p)^3 ||Q2^T y||^2 equals the direct Frobenius computation.
        let (data, kernel) = periodic_instance(40, 3);
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let direct = {
            let q2 = qr.q2();
            let fro: f64 = q2.iter().map(|v| v * v).sum();
            let z2 = q2.t().dot(data.y());
            fro.powi(3) * z2.dot(&z2)
        };
        let fast = zeta1(&qr, data.y());
        assert!(
            ((direct - fast) / direct).abs() < 1e-10,
            "{direct} vs {fast}"
        );
    }

    #[test]
    fn lambda_max_a_matches_direct_eigendecomposition() {
        // p = 1 (periodic kernel).
        let (data, kernel) = periodic_instance(60, 4);
        let t = null_matrix(&kernel, data.x().as_slice().unwrap()).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let tt = t.t().dot(&t);
        let tt_inv_sq = {
            let v = 1.0 / tt[[0, 0]];
            Array2::from_elem((1, 1), v * v)
        };
        let a = t.dot(&tt_inv_sq).dot(&t.t());
        let (vals, _) = eigh_desc(&a.view()).unwrap();
        let fast = lambda_max_a(&qr);
        assert!(
            ((vals[0] - fast) / vals[0]).abs() < 1e-8,
            "{} vs {fast}",
            vals[0]
        );

        // p = 2 (cubic kernel): explicit 2x2 inverse squared.
        let kernel = Kernel::cubic();
        let x = Array1::from_shape_fn(80, |i| (i + 1) as f64 / 80.0);
        let t = null_matrix(&kernel, x.as_slice().unwrap()).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let tt = t.t().dot(&t);
        let det = tt[[0, 0]] * tt[[1, 1]] - tt[[0, 1]] * tt[[1, 0]];
        let inv = Array2::from_shape_vec(
            (2, 2),
            vec![
                tt[[1, 1]] / det,
                -tt[[0, 1]] / det,
                -tt[[1, 0]] / det,
                tt[[0, 0]] / det,
            ],
        )
        .unwrap();
        let inv_sq = inv.dot(&inv);
        let a = t.dot(&inv_sq).dot(&t.t());
        let (vals, _) = eigh_desc(&a.view()).unwrap();
        let fast = lambda_max_a(&qr);
        assert!(
            ((vals[0] - fast) / vals[0]).abs() < 1e-8,
            "p = 2: {} vs {fast}",
            vals[0]
        );
    }

    #[test]
    fn analytic_tail_matches_direct_series() {
        // Direct summation oracle for D_K with K even.
        for rank in [4usize, 10] {
            let mut direct = 0.0;
            for nu in (rank / 2 + 1)..5000 {
                direct += 2.0 * (2.0 * std::f64::consts::PI * nu as f64).powi(-8);
            }
            let fast = analytic_tail_dk(rank);
            assert!(
                ((direct - fast) / direct).abs() < 1e-9,
                "rank {rank}: {direct} vs {fast}"
            );
        }
        // Odd rank keeps the orphaned partner mode in the tail.
        let d5 = analytic_tail_dk(5);
        let d6 = analytic_tail_dk(6);
        let nu3 = (2.0 * std::f64::consts::PI * 3.0).powi(-8);
        assert!(((d5 - d6 - nu3) / d5).abs() < 1e-9);
    }

    #[test]
    fn zero_gram_perturbation_gives_zero_bounds() {
        let (data, kernel) = periodic_instance(50, 5);
        let xs = data.x().as_slice().unwrap();
        let sigma = gram_sigma(&kernel, xs).unwrap();
        let t = null_matrix(&kernel, xs).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let lambda = 1e-4;
        let exact = fit_with_gram(data.y(), &sigma, &qr, lambda).unwrap();
        let coef = coefficient_bounds(&exact, &exact, &sigma, &sigma, &qr, data.y()).unwrap();
        assert_eq!(coef.c_bound, 0.0);
        assert_eq!(coef.d_bound, 0.0);
        assert_eq!(coef.sigma_diff_frob_sq, 0.0);
        // Mismatched lambda is rejected.
        let other = fit_with_gram(data.y(), &sigma, &qr, 2e-4).unwrap();
        assert!(coefficient_bounds(&exact, &other, &sigma, &sigma, &qr, data.y()).is_err());
    }

    #[test]
    fn observed_coefficient_errors_stay_below_their_bounds() {
        let (data, kernel) = periodic_instance(60, 6);
        let xs = data.x().as_slice().unwrap();
        let sigma = gram_sigma(&kernel, xs).unwrap();
        let t = null_matrix(&kernel, xs).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let lambda = 1e-4;
        let exact = fit_with_gram(data.y(), &sigma, &qr, lambda).unwrap();
        for rank in [4usize, 8, 16] {
            let basis = analytic_eigensystem(&kernel, rank).unwrap();
            let z = feature_matrix(&basis, xs).unwrap();
            let sigma_tilde = z.dot(&z.t());
            let trunc = fit_with_gram(data.y(), &sigma_tilde, &qr, lambda).unwrap();
            let coef =
                coefficient_bounds(&exact, &trunc, &sigma, &sigma_tilde, &qr, data.y()).unwrap();
            let c_diff = (&trunc.c - &exact.c).mapv(|v| v * v).sum();
            let d_diff = (&trunc.d - &exact.d).mapv(|v| v * v).sum();
            assert!(
                c_diff <= coef.c_bound,
                "rank {rank}: ||c~ - c||^2 = {c_diff} > bound {}",
                coef.c_bound
            );
            assert!(
                d_diff <= coef.d_bound,
                "rank {rank}: ||d~ - d||^2 = {d_diff} > bound {}",
                coef.d_bound
            );
        }
    }

    #[test]
    fn observed_errors_identity_and_offset() {
        let (data, kernel) = periodic_instance(30, 7);
        let fit = crate::solvers::fit_exact(&data, &kernel, 1e-3).unwrap();
        let same = observed_errors(&fit, &fit, 2001).unwrap();
        assert_eq!(same.l2_sq_f, 0.0);
        assert_eq!(same.l2_sq_f0, 0.0);
        assert_eq!(same.l2_sq_f1, 0.0);
        // A constant offset injected into d shows up as offset^2.
        let mut shifted = fit.clone();
        shifted.d[0] += 0.25;
        let obs = observed_errors(&fit, &shifted, 2001).unwrap();
        assert!((obs.l2_sq_f - 0.0625).abs() < 1e-10, "{}", obs.l2_sq_f);
        assert!((obs.l2_sq_f0 - 0.0625).abs() < 1e-10);
        assert!(obs.l2_sq_f1 < 1e-20);
    }

    #[test]
    fn eigenvalue_clusters_detect_pairs() {
        let basis = analytic_eigensystem(&Kernel::periodic(), 5).unwrap();
        let clusters = eigenvalue_clusters(basis.deltas());
        assert_eq!(clusters, vec![(0, 2), (2, 4), (4, 5)]);
    }

    #[test]
    fn validity_sweep_csv_round_trip() {
        let (data, kernel) = periodic_instance(40, 8);
        let xs = data.x().as_slice().unwrap();
        let sigma = gram_sigma(&kernel, xs).unwrap();
        let t = null_matrix(&kernel, xs).unwrap();
        let qr = QrFactors::new(&t).unwrap();
        let lambda = 1e-4;
        let exact = fit_with_gram(data.y(), &sigma, &qr, lambda).unwrap();
        let basis = analytic_eigensystem(&kernel, 6).unwrap();
        let z = feature_matrix(&basis, xs).unwrap();
        let sigma_tilde = z.dot(&z.t());
        let trunc = fit_with_gram(data.y(), &sigma_tilde, &qr, lambda).unwrap();
        let report = truncation_bounds(
            &exact,
            &trunc,
            &basis,
            &sigma,
            &sigma_tilde,
            &qr,
            data.y(),
            xs,
            None,
        )
        .unwrap();
        assert_eq!(
            BoundReport::csv_header().split(',').count(),
            report.csv_row("seed-8").split(',').count()
        );
        // Without observations the trailing fields stay empty.
        assert!(report.csv_row("seed-8").ends_with(",,,,"));
        let exact_result = exact_fit_result(&kernel, data.x(), &exact);
        let trunc_result = eigen_fit_result(&basis, xs, &trunc).unwrap();
        let obs = observed_errors(&trunc_result, &exact_result, 1001).unwrap();
        let full = report.with_observed(obs);
        let row = full.csv_row("seed-8");
        assert!(row.starts_with("seed-8,1,40,6,"));
        assert!(row.ends_with(",true"), "row = {row}");
        // The JSON form carries every named quantity.
        let json = full.to_json().unwrap();
        for field in [
            "zeta1",
            "zeta2",
            "zeta3",
            "lambda_max_a",
            "c_k",
            "d_k",
            "kappa",
            "sigma_diff_frob_sq",
            "bound_f0",
            "bound_f1",
            "bound_f",
            "observed",
        ] {
            assert!(json.contains(field), "missing {field} in report JSON");
        }
    }
}
