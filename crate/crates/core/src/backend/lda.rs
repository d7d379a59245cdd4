use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{check_labeled, classes};
use crate::error::{Error, Result};
use crate::linalg::{fix_sign, mean_of, ridge_cholesky, sym_eigen_desc, symmetrize};

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    /// `out_dim × in_dim`; rows are the discriminant directions.
    pub projection: DMatrix<f64>,
    /// Training mean, subtracted before projection.
    pub mean: DVector<f64>,
    /// Generalized eigenvalues of the kept directions, descending.
    pub eigenvalues: DVector<f64>,
}

impl LdaModel {
    pub fn in_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.in_dim() {
            return Err(Error::LengthMismatch {
                what: "LDA input".into(),
                expected: self.in_dim(),
                actual: v.len(),
            });
        }
        Ok(&self.projection * (v - &self.mean))
    }
}

/// Within- and between-class scatter (both normalized by the sample count).
pub(crate) fn scatter(vectors: &[DVector<f64>], groups: &[Vec<usize>]) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let dim = vectors[0].len();
    let n = vectors.len() as f64;
    let mean = mean_of(vectors);
    let mut sw = DMatrix::zeros(dim, dim);
    let mut sb = DMatrix::zeros(dim, dim);
    for g in groups {
        let members: Vec<DVector<f64>> = g.iter().map(|&i| vectors[i].clone()).collect();
        let m = mean_of(&members);
        for x in &members {
            let d = x - &m;
            sw += &d * d.transpose();
        }
        let d = &m - &mean;
        sb += &d * d.transpose() * g.len() as f64;
    }
    (mean, symmetrize(&(sw / n)), symmetrize(&(sb / n)))
}

/// Fisher LDA: directions are the top generalized eigenvectors of
/// `(S_b, S_w)`, scaled so that `wᵀ S_w w = 1`.
pub fn lda_fit(vectors: &[DVector<f64>], labels: &[usize], out_dim: usize) -> Result<LdaModel> {
    let dim = check_labeled(vectors, labels)?;
    let groups = classes(labels);
    if groups.len() < 2 {
        return Err(Error::SingleClass("LDA needs at least two classes".into()));
    }
    if groups.iter().all(|g| g.len() < 2) {
        return Err(Error::InvalidInput(
            "LDA needs at least one class with two or more samples".into(),
        ));
    }
    if out_dim == 0 {
        return Err(Error::Config("LDA output dimension must be positive".into()));
    }
    let limit = dim.min(groups.len() - 1);
    let out = if out_dim > limit {
        warn!("LDA output dimension {out_dim} clipped to {limit} ({dim} inputs, {} classes)", groups.len());
        limit
    } else {
        out_dim
    };
    let (mean, sw, sb) = scatter(vectors, &groups);
    let (_, ch, ridged) = ridge_cholesky(&sw)?;
    if ridged {
        warn!("within-class scatter is singular; ridge added");
    }
    // C = L⁻¹ S_b L⁻ᵀ, directions w = L⁻ᵀ v
    let l = ch.l();
    let linv_sb = l
        .solve_lower_triangular(&sb)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let c = l
        .solve_lower_triangular(&linv_sb.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let (values, vecs) = sym_eigen_desc(&c);
    if values[0] <= 1e-12 * sb.norm().max(f64::MIN_POSITIVE) || sb.norm() == 0.0 {
        warn!("between-class scatter is zero; LDA directions are arbitrary");
    }
    let lt = l.transpose();
    let mut projection = DMatrix::zeros(out, dim);
    for k in 0..out {
        let mut w = lt
            .solve_upper_triangular(&vecs.column(k).into_owned())
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        fix_sign(w.as_mut_slice());
        projection.set_row(k, &w.transpose());
    }
    Ok(LdaModel {
        projection,
        mean,
        eigenvalues: values.rows(0, out).into_owned(),
    })
}
