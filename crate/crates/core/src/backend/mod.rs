//! Embedding back-end: LDA projection, length normalization and
//! two-covariance PLDA with unsupervised adaptation.

mod lda;
mod plda;

pub use lda::{lda_fit, LdaModel};
pub use plda::{
    enroll_mean, plda_adapt, plda_fit, plda_score, AdaptConfig, PldaFit, PldaModel, PldaScorer,
};

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Projects `v` onto the unit sphere.
pub fn length_norm(v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!("cannot length-normalize a vector of norm {n}")));
    }
    Ok(v / n)
}

fn check_labeled(vectors: &[DVector<f64>], labels: &[usize]) -> Result<usize> {
    if vectors.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels".into(),
            expected: vectors.len(),
            actual: labels.len(),
        });
    }
    let dim = vectors
        .first()
        .ok_or_else(|| Error::EmptyInput("no vectors".into()))?
        .len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::LengthMismatch {
            what: "vector dimension".into(),
            expected: dim,
            actual: bad.len(),
        });
    }
    if vectors.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
        return Err(Error::InvalidInput("non-finite vector".into()));
    }
    Ok(dim)
}

/// Groups vector indices by label, in ascending label order.
fn classes(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    map.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_four_five() {
        let v = length_norm(&DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(length_norm(&DVector::zeros(3)).is_err());
    }

    proptest! {
        #[test]
        fn unit_norm_idempotent_scale_free(xs in prop::collection::vec(-10.0f64..10.0, 1..8), k in 0.01f64..100.0) {
            let v = DVector::from_vec(xs);
            prop_assume!(v.norm() > 1e-6);
            let u = length_norm(&v).unwrap();
            prop_assert!((u.norm() - 1.0).abs() < 1e-12);
            let uu = length_norm(&u).unwrap();
            prop_assert!((&uu - &u).amax() < 1e-15);
            let s = length_norm(&(&v * k)).unwrap();
            prop_assert!((&s - &u).amax() < 1e-14);
        }
    }
}
