use nalgebra::DMatrix;

use crate::netspec::ContextSpec;

fn clamp(t: i64, frames: usize) -> usize {
    t.clamp(0, frames as i64 - 1) as usize
}

/// Row `t` of the output is the concatenation of input rows `t + o` for each
/// offset `o`, with out-of-range rows clamped to the first/last frame.
pub fn splice(x: &DMatrix<f64>, ctx: &ContextSpec) -> DMatrix<f64> {
    let (frames, dim) = x.shape();
    if frames == 0 {
        return DMatrix::zeros(0, dim * ctx.len());
    }
    if ctx.is_current() {
        return x.clone();
    }
    let mut out = DMatrix::zeros(frames, dim * ctx.len());
    for (k, &o) in ctx.offsets().iter().enumerate() {
        for t in 0..frames {
            let src = clamp(t as i64 + o as i64, frames);
            for d in 0..dim {
                out[(t, k * dim + d)] = x[(src, d)];
            }
        }
    }
    out
}

/// Adjoint of [`splice`]: scatters spliced gradients back onto input frames.
pub fn unsplice(grad: &DMatrix<f64>, ctx: &ContextSpec, dim: usize) -> DMatrix<f64> {
    let frames = grad.nrows();
    if ctx.is_current() {
        return grad.clone();
    }
    let mut out = DMatrix::zeros(frames, dim);
    if frames == 0 {
        return out;
    }
    for (k, &o) in ctx.offsets().iter().enumerate() {
        for t in 0..frames {
            let dst = clamp(t as i64 + o as i64, frames);
            for d in 0..dim {
                out[(dst, d)] += grad[(t, k * dim + d)];
            }
        }
    }
    out
}
