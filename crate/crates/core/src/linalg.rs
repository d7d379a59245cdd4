//! Small dense linear-algebra helpers shared by the back-end.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative ridge used when a covariance is not positive definite.
pub const RIDGE_SCALE: f64 = 1e-6;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn mean_diag(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.diagonal().sum() / m.nrows() as f64
}

/// Eigen-decomposition of a symmetric matrix with eigenpairs sorted by
/// descending eigenvalue. Eigenvectors are the columns of the returned matrix,
/// each with its first non-negligible component made positive.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        fix_sign(col.as_mut_slice());
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

/// Flip `v` so that its first component with magnitude above a tiny floor is positive.
pub fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Projects a symmetric matrix onto the PSD cone by clamping negative eigenvalues.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clamped) * v.transpose()))
}

/// Cholesky factorization that repairs a non-PD matrix by adding
/// `RIDGE_SCALE * mean_diag` to the diagonal. Returns the (possibly
/// repaired) matrix, its factor, and whether a ridge was needed.
pub fn ridge_cholesky(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, bool)> {
    let sym = symmetrize(m);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        if well_conditioned(&ch) {
            return Ok((sym, ch, false));
        }
    }
    let base = mean_diag(&sym).abs();
    let mut eps = RIDGE_SCALE * if base > 0.0 { base } else { 1.0 };
    for _ in 0..40 {
        let repaired = &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * eps;
        if let Some(ch) = Cholesky::new(repaired.clone()) {
            if well_conditioned(&ch) {
                return Ok((repaired, ch, true));
            }
        }
        eps *= 10.0;
    }
    Err(Error::Numerical(
        "covariance could not be repaired to positive definite".into(),
    ))
}

fn well_conditioned(ch: &Cholesky<f64, Dyn>) -> bool {
    let d = ch.l_dirty().diagonal();
    let max = d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let min = d.iter().fold(f64::INFINITY, |a, x| a.min(x.abs()));
    max > 0.0 && min.is_finite() && min > 1e-7 * max
}

pub fn logdet_chol(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(symmetrize(&ch.inverse()))
}

pub fn spd_logdet(m: &DMatrix<f64>) -> Result<f64> {
    let ch = Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(logdet_chol(&ch))
}

pub fn mean_of(rows: &[DVector<f64>]) -> DVector<f64> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut acc = DVector::zeros(dim);
    for r in rows {
        acc += r;
    }
    if !rows.is_empty() {
        acc /= rows.len() as f64;
    }
    acc
}
