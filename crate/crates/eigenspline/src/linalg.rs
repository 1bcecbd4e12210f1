//! Small dense linear-algebra helpers shared across the crate.

use ndarray::prelude::*;

use crate::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Uses LAPACK's divide-and-conquer routine (`dsyevd`), which is
/// substantially faster than the QR-iteration driver for the matrix sizes
/// this crate works with. Returns `(eigenvalues, eigenvectors)` with
/// eigenvectors as columns, paired with the eigenvalue of the same index.
pub fn eigh_desc(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "eigh_desc requires a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    // dsyevd reads the lower triangle of a column-major buffer; for a
    // symmetric input the row-major slice can be reused as-is.
    let mut buf: Vec<f64> = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            buf.push(a[[i, j]]);
        }
    }
    let mut w = vec![0.0f64; n];
    let mut info = 0i32;
    // Workspace query.
    let mut work_query = [0.0f64];
    let mut iwork_query = [0i32];
    unsafe {
        lapack::dsyevd(
            b'V',
            b'L',
            n as i32,
            &mut buf,
            n as i32,
            &mut w,
            &mut work_query,
            -1,
            &mut iwork_query,
            -1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "dsyevd workspace query failed (info = {info})"
        )));
    }
    let lwork = work_query[0] as usize;
    let liwork = iwork_query[0] as usize;
    let mut work = vec![0.0f64; lwork.max(1)];
    let mut iwork = vec![0i32; liwork.max(1)];
    unsafe {
        lapack::dsyevd(
            b'V',
            b'L',
            n as i32,
            &mut buf,
            n as i32,
            &mut w,
            &mut work,
            lwork as i32,
            &mut iwork,
            liwork as i32,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!(
            "symmetric eigendecomposition failed (dsyevd info = {info}, n = {n})"
        )));
    }
    // LAPACK returns ascending eigenvalues with eigenvectors stored
    // column-major; reverse to descending.
    let vecs_asc =
        Array2::from_shape_vec((n, n).f(), buf).expect("dsyevd output has n*n elements");
    let mut vals = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    for k in 0..n {
        let src = n - 1 - k;
        vals[k] = w[src];
        vecs.column_mut(k).assign(&vecs_asc.column(src));
    }
    Ok((vals, vecs))
}

/// Composite trapezoid integral of pre-tabulated samples on a uniform grid.
pub fn trapezoid_sum(values: &[f64], step: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..values.len() - 1].iter().sum();
    step * (interior + 0.5 * (values[0] + values[values.len() - 1]))
}

/// Uniform grid of `nodes` points covering [0, 1] inclusive.
pub fn unit_grid(nodes: usize) -> Array1<f64> {
    assert!(nodes >= 2, "unit_grid needs at least two nodes");
    let h = 1.0 / (nodes - 1) as f64;
    Array1::from_shape_fn(nodes, |i| (i as f64 * h).min(1.0))
}
