use nalgebra::DMatrix;

/// Scale `β` such that `M Mᵀ ≈ β I`: the mean squared singular value.
pub fn semiorth_target(m: &DMatrix<f64>) -> f64 {
    m.norm_squared() / m.nrows() as f64
}

/// `‖M Mᵀ / β − I‖_F`.
pub fn semiorth_deviation(m: &DMatrix<f64>) -> f64 {
    let beta = semiorth_target(m);
    if beta == 0.0 {
        return 0.0;
    }
    let p = m * m.transpose() / beta;
    (p - DMatrix::identity(m.nrows(), m.nrows())).norm()
}

/// One step `M ← M − (α/β)(M Mᵀ − β I) M`. The step is divided by `β` so
/// that `α` is scale free; `α = 0.125` contracts the deviation by roughly a
/// quarter per call.
pub fn semiorth_step(m: &mut DMatrix<f64>, alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    let beta = semiorth_target(m);
    if beta == 0.0 {
        return;
    }
    let mut p = &*m * m.transpose();
    for i in 0..p.nrows() {
        p[(i, i)] -= beta;
    }
    let delta = p * &*m * (alpha / beta);
    *m -= delta;
}
