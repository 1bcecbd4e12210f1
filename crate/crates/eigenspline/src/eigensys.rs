//! Eigensystems of the reproducing kernel.
//!
//! For the periodic spline the Mercer eigensystem is known in closed form:
//! frequency `nu` contributes the pair `sqrt(2) cos(2 pi nu x)`,
//! `sqrt(2) sin(2 pi nu x)`, each with eigenvalue `(2 pi nu)^-4`. For a
//! general kernel the eigensystem is approximated on `N` pre-selected
//! points: the kernel matrix on those points is eigendecomposed once and
//! the eigenvectors are turned into functions by the Nystrom interpolation
//! formula. The decomposition is intended to be computed once, stored, and
//! reused, so a versioned binary serialization is provided.

use ndarray::prelude::*;
use rayon::prelude::*;

use crate::kernels::{gram_sigma, Kernel, SplineKind};
use crate::linalg::eigh_desc;
use crate::{Error, Result};

/// Relative threshold below which computed grid eigenvalues are clamped to
/// zero and excluded from rank selection.
pub const EIGENVALUE_CLAMP_REL: f64 = 1e-12;

/// Eigendecomposition of the kernel matrix on pre-selected points.
///
/// Holds the points `s`, the eigenvalues `gamma` (descending, with values
/// below `EIGENVALUE_CLAMP_REL * gamma[0]` clamped to zero), and the
/// orthogonal eigenvector matrix `v` (eigenvectors as columns). The
/// implied approximations are `delta_k ~ gamma_k / N` for eigenvalues and
/// the Nystrom formula for eigenfunctions.
#[derive(Debug, Clone)]
pub struct EigenSystemCache {
    kernel: Kernel,
    s: Array1<f64>,
    gamma: Array1<f64>,
    v: Array2<f64>,
}

impl EigenSystemCache {
    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    /// Number of pre-selected points N.
    pub fn num_points(&self) -> usize {
        self.s.len()
    }

    pub fn points(&self) -> &Array1<f64> {
        &self.s
    }

    /// Grid eigenvalues, descending, after clamping.
    pub fn gamma(&self) -> &Array1<f64> {
        &self.gamma
    }

    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.v
    }

    /// Approximate Mercer eigenvalue for a 0-based mode index.
    pub fn delta(&self, mode: usize) -> f64 {
        self.gamma[mode] / self.num_points() as f64
    }

    /// Number of strictly positive (usable) eigenvalues after clamping.
    pub fn positive_modes(&self) -> usize {
        self.gamma.iter().take_while(|&&g| g > 0.0).count()
    }

    /// Approximate eigenfunction via Nystrom interpolation,
    /// `phi_k(x) = sqrt(N) / gamma_k * sum_j R1(x, s_j) v[j, k]`.
    ///
    /// `mode` is 0-based. At the cache's own nodes this interpolates
    /// `sqrt(N) v[j, k]` up to the eigensolver residual.
    pub fn approx_eigenfunction(&self, mode: usize, x: f64) -> Result<f64> {
        let n = self.num_points();
        if mode >= n {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for a cache with {n} points"
            )));
        }
        let gamma = self.gamma[mode];
        if gamma <= 0.0 {
            return Err(Error::ZeroEigenvalue { index: mode });
        }
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidArgument(format!(
                "x = {x} is outside the domain [0, 1]"
            )));
        }
        let mut row = vec![0.0; n];
        self.kernel
            .rk_row(x, self.s.as_slice().expect("contiguous"), &mut row);
        let dot: f64 = row
            .iter()
            .zip(self.v.column(mode).iter())
            .map(|(r, v)| r * v)
            .sum();
        Ok((n as f64).sqrt() / gamma * dot)
    }

    /// Truncates the cache to its top `rank` modes as an evaluable basis.
    pub fn truncated_basis(&self, rank: usize) -> Result<TruncatedEigenBasis> {
        let available = self.positive_modes();
        if rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if rank > available {
            return Err(Error::RankExceeded {
                requested: rank,
                available,
            });
        }
        let n = self.num_points() as f64;
        let deltas = Array1::from_shape_fn(rank, |k| self.gamma[k] / n);
        // Column k holds v_k * sqrt(N) / gamma_k, so that
        // phi_k(x) = kernel_row(x) . column_k.
        let mut phi_cols = self.v.slice(s![.., ..rank]).to_owned();
        for (k, mut col) in phi_cols.axis_iter_mut(Axis(1)).enumerate() {
            col *= n.sqrt() / self.gamma[k];
        }
        Ok(TruncatedEigenBasis {
            kernel: self.kernel,
            deltas,
            source: BasisSource::Grid {
                s: self.s.clone(),
                phi_cols,
            },
        })
    }

    /// Feature matrix of the top `rank` modes at the given points.
    pub fn features(&self, xs: &[f64], rank: usize) -> Result<Array2<f64>> {
        feature_matrix(&self.truncated_basis(rank)?, xs)
    }

    /// CSV export of the approximate eigenvalues, one `(k, gamma_k / N)`
    /// row per mode with 1-based k.
    pub fn eigenvalue_csv(&self) -> String {
        let n = self.num_points() as f64;
        let mut out = String::from("k,eigenvalue\n");
        for (k, &g) in self.gamma.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k + 1, g / n));
        }
        out
    }
}

/// Builds the eigensystem cache on the uniform grid s_j = j/N, j = 1..N.
pub fn precompute_cache(kernel: &Kernel, n_points: usize) -> Result<EigenSystemCache> {
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 pre-selected points, got {n_points}"
        )));
    }
    let s = Array1::from_shape_fn(n_points, |j| (j + 1) as f64 / n_points as f64);
    precompute_cache_with_points(kernel, s)
}

/// Builds the cache on explicitly supplied points.
///
/// The quadrature weights behind the eigenvalue scaling stay uniform 1/N
/// regardless of the point layout, so strongly non-uniform point sets
/// degrade the eigenvalue approximation.
pub fn precompute_cache_with_points(
    kernel: &Kernel,
    s: Array1<f64>,
) -> Result<EigenSystemCache> {
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 pre-selected points, got {}",
            s.len()
        )));
    }
    let omega = gram_sigma(kernel, s.as_slice().expect("contiguous"))?;
    let (mut gamma, v) = eigh_desc(&omega.view())
        .map_err(|e| Error::Numerical(format!("eigendecomposition of the {0}x{0} kernel matrix failed: {e}", s.len())))?;
    let top = gamma[0];
    if !top.is_finite() || top <= 0.0 {
        return Err(Error::Numerical(format!(
            "leading kernel-matrix eigenvalue is {top}; matrix is not positive semi-definite"
        )));
    }
    let floor = EIGENVALUE_CLAMP_REL * top;
    gamma.mapv_inplace(|g| if g < floor { 0.0 } else { g });
    Ok(EigenSystemCache {
        kernel: *kernel,
        s,
        gamma,
        v,
    })
}

/// A rank-K eigenbasis: eigenvalues plus evaluable eigenfunctions, either
/// analytic (periodic kernel) or Nystrom-interpolated from a grid cache.
#[derive(Debug, Clone)]
pub struct TruncatedEigenBasis {
    kernel: Kernel,
    deltas: Array1<f64>,
    source: BasisSource,
}

#[derive(Debug, Clone)]
enum BasisSource {
    Analytic,
    Grid {
        s: Array1<f64>,
        /// Column k is v_k * sqrt(N) / gamma_k.
        phi_cols: Array2<f64>,
    },
}

impl TruncatedEigenBasis {
    pub fn rank(&self) -> usize {
        self.deltas.len()
    }

    pub fn deltas(&self) -> &Array1<f64> {
        &self.deltas
    }

    pub fn delta(&self, mode: usize) -> f64 {
        self.deltas[mode]
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.source, BasisSource::Analytic)
    }

    /// Evaluates eigenfunction `mode` (0-based) at `x`.
    pub fn eval(&self, mode: usize, x: f64) -> f64 {
        debug_assert!(mode < self.rank());
        match &self.source {
            BasisSource::Analytic => analytic_phi(mode, x),
            BasisSource::Grid { s, phi_cols } => {
                let mut row = vec![0.0; s.len()];
                self.kernel
                    .rk_row(x, s.as_slice().expect("contiguous"), &mut row);
                row.iter()
                    .zip(phi_cols.column(mode).iter())
                    .map(|(r, c)| r * c)
                    .sum()
            }
        }
    }

    /// Points and prediction projection V1 Gamma1^{-1/2} for grid-backed
    /// bases; `None` for the analytic eigensystem.
    pub fn grid_projection(&self) -> Option<(Array1<f64>, Array2<f64>)> {
        match &self.source {
            BasisSource::Analytic => None,
            BasisSource::Grid { s, phi_cols } => {
                let n = s.len() as f64;
                let mut proj = phi_cols.clone();
                for (k, mut col) in proj.axis_iter_mut(Axis(1)).enumerate() {
                    // Column is v_k sqrt(N)/gamma_k; rescale to v_k / sqrt(gamma_k).
                    let gamma = self.deltas[k] * n;
                    col *= gamma.sqrt() / n.sqrt();
                }
                Some((s.clone(), proj))
            }
        }
    }

    /// Evaluates all eigenfunctions at `x` into `out` (length = rank).
    pub fn eval_row(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rank());
        match &self.source {
            BasisSource::Analytic => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = analytic_phi(k, x);
                }
            }
            BasisSource::Grid { s, phi_cols } => {
                let mut row = vec![0.0; s.len()];
                self.kernel
                    .rk_row(x, s.as_slice().expect("contiguous"), &mut row);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = row
                        .iter()
                        .zip(phi_cols.column(k).iter())
                        .map(|(r, c)| r * c)
                        .sum();
                }
            }
        }
    }
}

/// Analytic periodic eigenfunction for a 0-based mode index: modes come in
/// frequency pairs (cos first, then sin).
fn analytic_phi(mode: usize, x: f64) -> f64 {
    let nu = (mode / 2 + 1) as f64;
    let arg = 2.0 * std::f64::consts::PI * nu * x;
    let sqrt2 = std::f64::consts::SQRT_2;
    if mode % 2 == 0 {
        sqrt2 * arg.cos()
    } else {
        sqrt2 * arg.sin()
    }
}

/// Analytic periodic eigenvalue for a 0-based mode index.
pub fn analytic_delta(mode: usize) -> f64 {
    let nu = (mode / 2 + 1) as f64;
    (2.0 * std::f64::consts::PI * nu).powi(-4)
}

/// The closed-form eigensystem of the periodic kernel, truncated to `rank`
/// modes sorted by decreasing eigenvalue.
pub fn analytic_eigensystem(kernel: &Kernel, rank: usize) -> Result<TruncatedEigenBasis> {
    if kernel.kind() != SplineKind::Periodic {
        return Err(Error::UnsupportedKernel {
            required: "periodic",
            got: kernel.kind().name().to_string(),
        });
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let deltas = Array1::from_shape_fn(rank, analytic_delta);
    Ok(TruncatedEigenBasis {
        kernel: *kernel,
        deltas,
        source: BasisSource::Analytic,
    })
}

/// Feature matrix Z with Z[i, k] = sqrt(delta_k) * phi_k(x_i), so the
/// implied Gram approximation is Z Z^T.
///
/// For a grid-backed basis this is the matrix
/// `U2 V1 Gamma1^{-1/2}` with U2 the kernel rows at `xs`.
pub fn feature_matrix(basis: &TruncatedEigenBasis, xs: &[f64]) -> Result<Array2<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(
            "feature_matrix requires at least one evaluation point".into(),
        ));
    }
    let rank = basis.rank();
    match &basis.source {
        BasisSource::Analytic => {
            for &x in xs {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::InvalidArgument(format!(
                        "x = {x} is outside the domain [0, 1]"
                    )));
                }
            }
            let sqrt_d: Vec<f64> = basis.deltas.iter().map(|d| d.sqrt()).collect();
            let mut z = Array2::zeros((xs.len(), rank));
            z.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(i, mut row)| {
                    for k in 0..rank {
                        row[k] = sqrt_d[k] * analytic_phi(k, xs[i]);
                    }
                });
            Ok(z)
        }
        BasisSource::Grid { s, phi_cols } => {
            for &x in xs {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::InvalidArgument(format!(
                        "x = {x} is outside the domain [0, 1]"
                    )));
                }
            }
            // sqrt(delta_k) * phi_k(x) = kernel_row(x) . v_k / sqrt(gamma_k);
            // phi_cols already carries sqrt(N)/gamma_k, so rescale by
            // sqrt(delta_k) = sqrt(gamma_k / N).
            let mut proj = phi_cols.clone();
            let n = s.len() as f64;
            for (k, mut col) in proj.axis_iter_mut(Axis(1)).enumerate() {
                col *= (basis.deltas[k] * n).sqrt() / n.sqrt();
            }
            // Assemble U2 . proj in row blocks so the kernel matrix never
            // materializes whole; keeps the large-n path in cache.
            let n_points = s.len();
            let s_slice = s.as_slice().expect("contiguous");
            let kernel = basis.kernel;
            let block = 2048usize;
            let mut z = Array2::zeros((xs.len(), rank));
            z.axis_chunks_iter_mut(Axis(0), block)
                .into_par_iter()
                .enumerate()
                .for_each(|(bi, mut z_block)| {
                    let start = bi * block;
                    let rows = z_block.nrows();
                    let mut u2 = Array2::zeros((rows, n_points));
                    for (i, mut row) in u2.axis_iter_mut(Axis(0)).enumerate() {
                        kernel.rk_row(
                            xs[start + i],
                            s_slice,
                            row.as_slice_mut().expect("contiguous row"),
                        );
                    }
                    z_block.assign(&u2.dot(&proj));
                });
            Ok(z)
        }
    }
}

// ---------------------------------------------------------------------------
// Binary cache persistence
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"EIGC";
const CACHE_VERSION: u32 = 1;

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc32_table();

fn crc32(data: &[u8]) -> u32 {
    let mut c = u32::MAX;
    for &b in data {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ u32::MAX
}

fn kernel_id(kernel: &Kernel) -> u32 {
    match kernel.kind() {
        SplineKind::Cubic => 0,
        SplineKind::Periodic => 1,
    }
}

fn kernel_from_id(id: u32) -> Result<Kernel> {
    match id {
        0 => Ok(Kernel::cubic()),
        1 => Ok(Kernel::periodic()),
        other => Err(Error::Format(format!("unknown kernel id {other}"))),
    }
}

/// Serializes a cache: magic "EIGC", format version, kernel id, N, then
/// `s`, `gamma`, and `V` (column-major) as little-endian f64, trailed by a
/// CRC-32 of everything before it.
pub fn save_cache(cache: &EigenSystemCache) -> Vec<u8> {
    let n = cache.num_points();
    let mut out = Vec::with_capacity(4 + 4 + 4 + 8 + 8 * (2 * n + n * n) + 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&kernel_id(&cache.kernel).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for &v in cache.s.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in cache.gamma.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for j in 0..n {
        for i in 0..n {
            out.extend_from_slice(&cache.v[[i, j]].to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Deserializes a cache produced by [`save_cache`].
pub fn load_cache(bytes: &[u8]) -> Result<EigenSystemCache> {
    const HEADER: usize = 4 + 4 + 4 + 8;
    if bytes.len() < HEADER + 4 {
        return Err(Error::Corruption(format!(
            "byte stream truncated: {} bytes is below the minimum cache size",
            bytes.len()
        )));
    }
    if &bytes[0..4] != CACHE_MAGIC {
        return Err(Error::Format("bad magic bytes (not an eigensystem cache)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported cache format version {version} (expected {CACHE_VERSION})"
        )));
    }
    let kernel = kernel_from_id(u32::from_le_bytes(bytes[8..12].try_into().unwrap()))?;
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = HEADER + 8 * (2 * n + n * n) + 4;
    if bytes.len() != expected {
        return Err(Error::Corruption(format!(
            "byte stream has {} bytes, expected {expected} for N = {n}",
            bytes.len()
        )));
    }
    let payload_end = expected - 4;
    let stored_crc = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
    let actual_crc = crc32(&bytes[..payload_end]);
    if stored_crc != actual_crc {
        return Err(Error::Corruption(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }
    let mut offset = HEADER;
    let mut read_f64 = |bytes: &[u8]| {
        let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
        offset += 8;
        v
    };
    let s = Array1::from_shape_fn(n, |_| read_f64(bytes));
    let gamma = Array1::from_shape_fn(n, |_| read_f64(bytes));
    let mut v = Array2::zeros((n, n));
    for j in 0..n {
        for i in 0..n {
            v[[i, j]] = read_f64(bytes);
        }
    }
    Ok(EigenSystemCache {
        kernel,
        s,
        gamma,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{trapezoid_sum, unit_grid};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn precompute_rejects_tiny_grids() {
        assert!(precompute_cache(&Kernel::cubic(), 1).is_err());
        assert!(precompute_cache(&Kernel::cubic(), 0).is_err());
    }

    #[test]
    fn eigenvectors_are_orthogonal() {
        let cache = precompute_cache(&Kernel::cubic(), 60).unwrap();
        let v = cache.eigenvectors();
        let vtv = v.t().dot(v);
        for i in 0..60 {
            for j in 0..60 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[[i, j]] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reconstruction_matches_kernel_matrix() {
        let cache = precompute_cache(&Kernel::periodic(), 50).unwrap();
        let omega = gram_sigma(&Kernel::periodic(), cache.points().as_slice().unwrap()).unwrap();
        let recon = cache
            .eigenvectors()
            .dot(&Array2::from_diag(cache.gamma()))
            .dot(&cache.eigenvectors().t());
        let num: f64 = (&recon - &omega).iter().map(|d| d * d).sum::<f64>().sqrt();
        let den: f64 = omega.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(num <= 1e-6 * den, "relative Frobenius error {}", num / den);
    }

    #[test]
    fn periodic_grid_eigenvalues_match_analytic() {
        let cache = precompute_cache(&Kernel::periodic(), 200).unwrap();
        for mode in 0..10 {
            let approx = cache.delta(mode);
            let exact = analytic_delta(mode);
            assert!(
                (approx - exact).abs() / exact < 0.01,
                "mode {mode}: {approx} vs {exact}"
            );
        }
    }

    #[test]
    fn cubic_leading_eigenvalue_grid_convergence() {
        let coarse = precompute_cache(&Kernel::cubic(), 100).unwrap();
        let fine = precompute_cache(&Kernel::cubic(), 400).unwrap();
        let d_coarse = coarse.delta(0);
        let d_fine = fine.delta(0);
        assert!(
            (d_coarse - d_fine).abs() / d_fine < 0.05,
            "{d_coarse} vs {d_fine}"
        );
    }

    #[test]
    fn periodic_grid_convergence_is_monotone() {
        let mut previous = f64::INFINITY;
        for n in [100usize, 200, 400] {
            let cache = precompute_cache(&Kernel::periodic(), n).unwrap();
            let worst = (0..10)
                .map(|k| {
                    let exact = analytic_delta(k);
                    ((cache.delta(k) - exact) / exact).abs()
                })
                .fold(0.0, f64::max);
            assert!(
                worst <= previous + 1e-12,
                "relative error grew from {previous} to {worst} at N = {n}"
            );
            previous = worst;
        }
        assert!(previous < 0.01, "error at N = 400 is {previous}");
    }

    #[test]
    fn nystrom_interpolates_nodes() {
        let cache = precompute_cache(&Kernel::periodic(), 100).unwrap();
        let n = cache.num_points() as f64;
        for mode in 0..20 {
            for j in [0usize, 17, 63, 99] {
                let x = cache.points()[j];
                let phi = cache.approx_eigenfunction(mode, x).unwrap();
                let expect = n.sqrt() * cache.eigenvectors()[[j, mode]];
                assert!(
                    (phi - expect).abs() < 1e-8,
                    "mode {mode}, node {j}: {phi} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn node_weighted_inner_products_are_orthonormal() {
        // (1/N) sum_j phi_k(s_j) phi_l(s_j) with phi evaluated as
        // sqrt(N) v[j, k] is exactly the eigenvector inner product.
        let cache = precompute_cache(&Kernel::cubic(), 40).unwrap();
        let v = cache.eigenvectors();
        for k in 0..5 {
            for l in 0..5 {
                let ip: f64 = (0..40).map(|j| v[[j, k]] * v[[j, l]]).sum();
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn approx_eigenfunction_error_paths() {
        let cache = precompute_cache(&Kernel::cubic(), 30).unwrap();
        assert!(cache.approx_eigenfunction(99, 0.5).is_err());
        assert!(cache.approx_eigenfunction(0, 1.5).is_err());
        // Clamped eigenvalues are unusable.
        let zero_mode = cache.positive_modes();
        if zero_mode < cache.num_points() {
            assert!(matches!(
                cache.approx_eigenfunction(zero_mode, 0.5),
                Err(Error::ZeroEigenvalue { .. })
            ));
        }
    }

    #[test]
    fn approx_eigenfunction_is_continuous() {
        let cache = precompute_cache(&Kernel::cubic(), 50).unwrap();
        let grid = unit_grid(2001);
        for mode in [0usize, 3, 9] {
            let vals: Vec<f64> = grid
                .iter()
                .map(|&x| cache.approx_eigenfunction(mode, x).unwrap())
                .collect();
            let sup = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            for w in vals.windows(2) {
                assert!(
                    (w[1] - w[0]).abs() < 0.05 * sup.max(1.0),
                    "jump in mode {mode}"
                );
            }
        }
    }

    #[test]
    fn analytic_eigensystem_reference() {
        let basis = analytic_eigensystem(&Kernel::periodic(), 2).unwrap();
        let expect = (2.0 * std::f64::consts::PI).powi(-4);
        assert!((basis.delta(0) - expect).abs() < 1e-12);
        assert!((basis.delta(1) - expect).abs() < 1e-12);
        assert!((expect - 6.4163e-4).abs() < 1e-7);
        assert!(analytic_eigensystem(&Kernel::cubic(), 2).is_err());
    }

    #[test]
    fn analytic_modes_are_orthonormal() {
        let basis = analytic_eigensystem(&Kernel::periodic(), 6).unwrap();
        let grid = unit_grid(10_001);
        let h = 1.0 / 10_000.0;
        for k in 0..6 {
            for l in k..6 {
                let vals: Vec<f64> = grid
                    .iter()
                    .map(|&x| basis.eval(k, x) * basis.eval(l, x))
                    .collect();
                let ip = trapezoid_sum(&vals, h);
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-8, "k = {k}, l = {l}: {ip}");
            }
        }
    }

    #[test]
    fn analytic_modes_satisfy_integral_equation() {
        // integral R1(x, z) phi_k(z) dz = delta_k phi_k(x).
        let kernel = Kernel::periodic();
        let basis = analytic_eigensystem(&kernel, 4).unwrap();
        let grid = unit_grid(10_001);
        let h = 1.0 / 10_000.0;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: f64 = rng.gen_range(0.0..=1.0);
            for k in 0..4 {
                let vals: Vec<f64> = grid
                    .iter()
                    .map(|&z| kernel.rk_unchecked(x, z) * basis.eval(k, z))
                    .collect();
                let lhs = trapezoid_sum(&vals, h);
                let rhs = basis.delta(k) * basis.eval(k, x);
                assert!((lhs - rhs).abs() < 1e-6, "k = {k}, x = {x}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn degenerate_pair_subspace_is_recovered() {
        // Individual eigenvectors of the exactly-degenerate cos/sin pair are
        // arbitrary rotations, so compare spanned subspaces instead.
        let cache = precompute_cache(&Kernel::periodic(), 400).unwrap();
        let grid = unit_grid(4001);
        let h = 1.0 / 4000.0;
        let approx: Vec<Vec<f64>> = (0..2)
            .map(|k| {
                grid.iter()
                    .map(|&x| cache.approx_eigenfunction(k, x).unwrap())
                    .collect()
            })
            .collect();
        let exact: Vec<Vec<f64>> = (0..2)
            .map(|k| grid.iter().map(|&x| analytic_phi(k, x)).collect())
            .collect();
        let ip = |a: &[f64], b: &[f64]| {
            let vals: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
            trapezoid_sum(&vals, h)
        };
        // Orthonormalize the approximate pair (it is already close).
        let mut a0 = approx[0].clone();
        let norm0 = ip(&a0, &a0).sqrt();
        a0.iter_mut().for_each(|v| *v /= norm0);
        let mut a1 = approx[1].clone();
        let proj = ip(&a1, &a0);
        a1.iter_mut().zip(&a0).for_each(|(v, u)| *v -= proj * u);
        let norm1 = ip(&a1, &a1).sqrt();
        a1.iter_mut().for_each(|v| *v /= norm1);
        // Cross-Gram between orthonormal bases; principal angles from its SVD.
        let x00 = ip(&a0, &exact[0]);
        let x01 = ip(&a0, &exact[1]);
        let x10 = ip(&a1, &exact[0]);
        let x11 = ip(&a1, &exact[1]);
        // Singular values of the 2x2 cross-Gram.
        let g = [
            x00 * x00 + x10 * x10,
            x00 * x01 + x10 * x11,
            x01 * x01 + x11 * x11,
        ];
        let tr = g[0] + g[2];
        let det = g[0] * g[2] - g[1] * g[1];
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let sigma_min_sq = (tr / 2.0 - disc).clamp(0.0, 1.0);
        // Operator-norm distance between the projectors is sin(theta_max).
        let sin_theta = (1.0 - sigma_min_sq).max(0.0).sqrt();
        assert!(sin_theta < 0.02, "subspace distance {sin_theta}");
    }

    #[test]
    fn full_rank_features_reconstruct_kernel_matrix() {
        let cache = precompute_cache(&Kernel::periodic(), 40).unwrap();
        let rank = cache.positive_modes();
        let z = cache
            .features(cache.points().as_slice().unwrap(), rank)
            .unwrap();
        let zzt = z.dot(&z.t());
        let omega = gram_sigma(&Kernel::periodic(), cache.points().as_slice().unwrap()).unwrap();
        let num: f64 = (&zzt - &omega).iter().map(|d| d * d).sum::<f64>().sqrt();
        let den: f64 = omega.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(num <= 1e-8 * den, "relative error {}", num / den);
    }

    #[test]
    fn analytic_feature_gram_error_decreases_in_rank() {
        let kernel = Kernel::periodic();
        let xs: Vec<f64> = (0..80).map(|i| (i + 1) as f64 / 80.0).collect();
        let sigma = gram_sigma(&kernel, &xs).unwrap();
        let mut previous = f64::INFINITY;
        for rank in [4usize, 8, 16, 32] {
            let basis = analytic_eigensystem(&kernel, rank).unwrap();
            let z = feature_matrix(&basis, &xs).unwrap();
            let zzt = z.dot(&z.t());
            let err: f64 = (&zzt - &sigma).iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!(err <= previous + 1e-14, "error grew at rank {rank}");
            previous = err;
        }
    }

    #[test]
    fn cubic_grid_features_approximate_the_dense_gram() {
        // Frozen from a reference run: at n = 500, N = 100, K = 50 the
        // observed relative Frobenius error is 2.0e-6, well under the
        // 1e-3 budget asserted here.
        let kernel = Kernel::cubic();
        let n = 500;
        let xs: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
        let sigma = gram_sigma(&kernel, &xs).unwrap();
        let den: f64 = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cache = precompute_cache(&kernel, 100).unwrap();
        let z = cache.features(&xs, 50).unwrap();
        let zzt = z.dot(&z.t());
        let num: f64 = (&zzt - &sigma).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "relative Frobenius error {}", num / den);
    }

    #[test]
    fn rank_errors_are_reported() {
        let cache = precompute_cache(&Kernel::cubic(), 30).unwrap();
        let err = cache.truncated_basis(31).unwrap_err();
        assert!(matches!(err, Error::RankExceeded { .. }));
    }

    #[test]
    fn cache_round_trip_is_field_identical() {
        let cache = precompute_cache(&Kernel::cubic(), 25).unwrap();
        let bytes = save_cache(&cache);
        let restored = load_cache(&bytes).unwrap();
        assert_eq!(restored.kernel(), cache.kernel());
        assert_eq!(restored.points(), cache.points());
        assert_eq!(restored.gamma(), cache.gamma());
        assert_eq!(restored.eigenvectors(), cache.eigenvectors());
        // Identical features from the reloaded cache, bit for bit.
        let xs: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let z1 = cache.features(&xs, 5).unwrap();
        let z2 = restored.features(&xs, 5).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn cache_corruption_is_detected() {
        let cache = precompute_cache(&Kernel::periodic(), 10).unwrap();
        let bytes = save_cache(&cache);

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(
            load_cache(truncated),
            Err(Error::Corruption(_))
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xFF;
        assert!(matches!(load_cache(&flipped), Err(Error::Corruption(_))));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(load_cache(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = bytes;
        bad_version[4] = 99;
        // Version bytes change the checksum region too, so patch crc last.
        let pe = bad_version.len() - 4;
        let crc = crc32(&bad_version[..pe]);
        bad_version[pe..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(load_cache(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn eigenvalue_csv_header_and_rows() {
        let cache = precompute_cache(&Kernel::periodic(), 5).unwrap();
        let csv = cache.eigenvalue_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("k,eigenvalue"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        assert_eq!(csv.lines().count(), 6);
    }
}
