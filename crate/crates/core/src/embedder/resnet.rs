//! Residual 2-D frame encoder. Features are treated as a one-channel
//! time × frequency image; activations are stored as `(T·F) × C` matrices
//! with row `t·F + f`. Convolutions are 3×3 with zero padding; the first
//! block of every stage after the first halves the frequency axis. Blocks
//! use pre-activation form `y = shortcut(x) + conv2(relu(conv1(relu(x))))`,
//! where the shortcut subsamples frequency and zero-pads missing channels.
//! The stack output is the frequency average of `relu(y)`, one row per frame.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::Params;
use super::KinkTracker;
use crate::netspec::ResnetShape;

#[derive(Debug, Clone)]
struct Conv {
    w: String,
    b: String,
    cin: usize,
    cout: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    conv2: Conv,
}

/// Compiled residual stack.
#[derive(Debug, Clone)]
pub struct ResStack {
    stem: Conv,
    blocks: Vec<Block>,
    pub out_channels: usize,
}

pub(crate) struct BlockCache {
    x: DMatrix<f64>,
    fin: usize,
    fout: usize,
    p1: DMatrix<f64>,
    h1: DMatrix<f64>,
    p2: DMatrix<f64>,
}

pub struct StackCache {
    frames: usize,
    p0: DMatrix<f64>,
    blocks: Vec<BlockCache>,
    y: DMatrix<f64>,
    freq: usize,
}

fn out_len(fin: usize, stride: usize) -> usize {
    fin.div_ceil(stride)
}

fn im2col(x: &DMatrix<f64>, frames: usize, fin: usize, stride: usize) -> DMatrix<f64> {
    let cin = x.ncols();
    let fout = out_len(fin, stride);
    let mut p = DMatrix::zeros(frames * fout, 9 * cin);
    for dt in -1i64..=1 {
        for df in -1i64..=1 {
            let tap = ((dt + 1) * 3 + (df + 1)) as usize;
            for c in 0..cin {
                let col = tap * cin + c;
                let src = x.column(c);
                let mut dst = p.column_mut(col);
                for t in 0..frames {
                    let ti = t as i64 + dt;
                    if ti < 0 || ti >= frames as i64 {
                        continue;
                    }
                    for fo in 0..fout {
                        let fi = (fo * stride) as i64 + df;
                        if fi < 0 || fi >= fin as i64 {
                            continue;
                        }
                        dst[t * fout + fo] = src[ti as usize * fin + fi as usize];
                    }
                }
            }
        }
    }
    p
}

fn col2im(dp: &DMatrix<f64>, frames: usize, fin: usize, stride: usize, cin: usize) -> DMatrix<f64> {
    let fout = out_len(fin, stride);
    let mut dx = DMatrix::zeros(frames * fin, cin);
    for dt in -1i64..=1 {
        for df in -1i64..=1 {
            let tap = ((dt + 1) * 3 + (df + 1)) as usize;
            for c in 0..cin {
                let src = dp.column(tap * cin + c);
                let mut dst = dx.column_mut(c);
                for t in 0..frames {
                    let ti = t as i64 + dt;
                    if ti < 0 || ti >= frames as i64 {
                        continue;
                    }
                    for fo in 0..fout {
                        let fi = (fo * stride) as i64 + df;
                        if fi < 0 || fi >= fin as i64 {
                            continue;
                        }
                        dst[ti as usize * fin + fi as usize] += src[t * fout + fo];
                    }
                }
            }
        }
    }
    dx
}

fn shortcut(x: &DMatrix<f64>, frames: usize, fin: usize, stride: usize, cout: usize) -> DMatrix<f64> {
    let fout = out_len(fin, stride);
    let cin = x.ncols();
    let mut out = DMatrix::zeros(frames * fout, cout);
    for c in 0..cin.min(cout) {
        for t in 0..frames {
            for fo in 0..fout {
                out[(t * fout + fo, c)] = x[(t * fin + fo * stride, c)];
            }
        }
    }
    out
}

fn shortcut_adjoint(
    dy: &DMatrix<f64>,
    frames: usize,
    fin: usize,
    stride: usize,
    cin: usize,
) -> DMatrix<f64> {
    let fout = out_len(fin, stride);
    let mut dx = DMatrix::zeros(frames * fin, cin);
    for c in 0..cin.min(dy.ncols()) {
        for t in 0..frames {
            for fo in 0..fout {
                dx[(t * fin + fo * stride, c)] += dy[(t * fout + fo, c)];
            }
        }
    }
    dx
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn relu_grad(d: &DMatrix<f64>, pre: &DMatrix<f64>) -> DMatrix<f64> {
    d.zip_map(pre, |g, z| if z > 0.0 { g } else { 0.0 })
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for c in 0..m.ncols() {
        let bc = b[(c, 0)];
        m.column_mut(c).add_scalar_mut(bc);
    }
}

fn conv_apply(p: &Params, conv: &Conv, patches: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = patches * p.tensor(&conv.w).transpose();
    add_bias(&mut out, p.tensor(&conv.b));
    out
}

fn conv_grads(grads: &mut Params, conv: &Conv, patches: &DMatrix<f64>, dout: &DMatrix<f64>) {
    grads.accumulate(&conv.w, &(dout.transpose() * patches));
    let db = DMatrix::from_iterator(dout.ncols(), 1, dout.column_iter().map(|c| c.sum()));
    grads.accumulate(&conv.b, &db);
}

impl ResStack {
    pub fn new(prefix: &str, shape: &ResnetShape) -> Self {
        let conv = |name: String, cin, cout, stride| Conv {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            cin,
            cout,
            stride,
        };
        let first = shape.channels[0];
        let stem = conv(format!("{prefix}.stem"), 1, first, 1);
        let mut blocks = Vec::new();
        let mut cin = first;
        for (s, (&cout, &n)) in shape.channels.iter().zip(&shape.blocks).enumerate() {
            for j in 0..n {
                let stride = if s > 0 && j == 0 { 2 } else { 1 };
                let base = format!("{prefix}.s{}b{}", s + 1, j + 1);
                blocks.push(Block {
                    conv1: conv(format!("{base}.c1"), cin, cout, stride),
                    conv2: conv(format!("{base}.c2"), cout, cout, 1),
                });
                cin = cout;
            }
        }
        Self {
            stem,
            blocks,
            out_channels: cin,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2]))
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        for c in self.convs() {
            let fan_in = 9 * c.cin;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            params.insert(&c.w, DMatrix::from_fn(c.cout, fan_in, |_, _| normal.sample(rng)));
            params.insert(&c.b, DMatrix::zeros(c.cout, 1));
        }
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.convs()
            .flat_map(|c| [(c.w.clone(), (c.cout, 9 * c.cin)), (c.b.clone(), (c.cout, 1))])
            .collect()
    }

    pub fn forward(
        &self,
        p: &Params,
        feats: &DMatrix<f64>,
        kinks: &mut KinkTracker,
    ) -> (DMatrix<f64>, StackCache) {
        let (frames, freq) = feats.shape();
        let img = DMatrix::from_fn(frames * freq, 1, |r, _| feats[(r / freq, r % freq)]);
        let p0 = im2col(&img, frames, freq, 1);
        let mut y = conv_apply(p, &self.stem, &p0);
        let mut fin = freq;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let stride = b.conv1.stride;
            let fout = out_len(fin, stride);
            kinks.observe(&y);
            let p1 = im2col(&relu(&y), frames, fin, stride);
            let h1 = conv_apply(p, &b.conv1, &p1);
            kinks.observe(&h1);
            let p2 = im2col(&relu(&h1), frames, fout, 1);
            let h2 = conv_apply(p, &b.conv2, &p2);
            let next = shortcut(&y, frames, fin, stride, b.conv1.cout) + h2;
            caches.push(BlockCache {
                x: std::mem::replace(&mut y, next),
                fin,
                fout,
                p1,
                h1,
                p2,
            });
            fin = fout;
        }
        kinks.observe(&y);
        let r = relu(&y);
        let mut out = DMatrix::zeros(frames, r.ncols());
        for c in 0..r.ncols() {
            for t in 0..frames {
                let s: f64 = (0..fin).map(|f| r[(t * fin + f, c)]).sum();
                out[(t, c)] = s / fin as f64;
            }
        }
        (
            out,
            StackCache {
                frames,
                p0,
                blocks: caches,
                y,
                freq: fin,
            },
        )
    }

    /// Accumulates parameter gradients given the gradient of the stack output.
    pub fn backward(&self, p: &Params, cache: &StackCache, dout: &DMatrix<f64>, grads: &mut Params) {
        let frames = cache.frames;
        let fin = cache.freq;
        let dr = DMatrix::from_fn(frames * fin, dout.ncols(), |r, c| dout[(r / fin, c)] / fin as f64);
        let mut dy = relu_grad(&dr, &cache.y);
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            conv_grads(grads, &b.conv2, &bc.p2, &dy);
            let da2 = col2im(&(&dy * p.tensor(&b.conv2.w)), frames, bc.fout, 1, b.conv2.cin);
            let dh1 = relu_grad(&da2, &bc.h1);
            conv_grads(grads, &b.conv1, &bc.p1, &dh1);
            let da = col2im(
                &(&dh1 * p.tensor(&b.conv1.w)),
                frames,
                bc.fin,
                b.conv1.stride,
                b.conv1.cin,
            );
            let dx = relu_grad(&da, &bc.x)
                + shortcut_adjoint(&dy, frames, bc.fin, b.conv1.stride, b.conv1.cin);
            dy = dx;
        }
        conv_grads(grads, &self.stem, &cache.p0, &dy);
    }

    /// One residual block applied to a `(T·F) × C` activation, for inspection.
    pub fn apply_block(
        &self,
        p: &Params,
        block: usize,
        x: &DMatrix<f64>,
        frames: usize,
        fin: usize,
    ) -> DMatrix<f64> {
        let b = &self.blocks[block];
        let stride = b.conv1.stride;
        let h1 = conv_apply(p, &b.conv1, &im2col(&relu(x), frames, fin, stride));
        let h2 = conv_apply(p, &b.conv2, &im2col(&relu(&h1), frames, out_len(fin, stride), 1));
        shortcut(x, frames, fin, stride, b.conv1.cout) + h2
    }

    pub fn block_names(&self, block: usize) -> [&str; 4] {
        let b = &self.blocks[block];
        [&b.conv1.w, &b.conv1.b, &b.conv2.w, &b.conv2.b]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_channels(&self, block: usize) -> (usize, usize, usize) {
        let b = &self.blocks[block];
        (b.conv1.cin, b.conv1.cout, b.conv1.stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (frames, fin, cin) = (4, 5, 2);
        for stride in [1, 2] {
            let x = DMatrix::from_fn(frames * fin, cin, |r, c| ((r * 3 + c * 7) % 11) as f64 - 5.0);
            let p = im2col(&x, frames, fin, stride);
            let g = DMatrix::from_fn(p.nrows(), p.ncols(), |r, c| ((r * 5 + c * 2) % 9) as f64 - 4.0);
            let lhs = p.component_mul(&g).sum();
            let rhs = x.component_mul(&col2im(&g, frames, fin, stride, cin)).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_kernel_block_is_padded_identity() {
        let shape = ResnetShape {
            channels: vec![2, 4],
            blocks: vec![1, 1],
        };
        let stack = ResStack::new("r", &shape);
        let mut p = Params::new();
        stack.init(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        for name in stack.block_names(1) {
            let t = p.get_mut(name).unwrap();
            t.fill(0.0);
        }
        let (frames, fin) = (3, 6);
        // signed input: the identity must hold without any rectification
        let x = DMatrix::from_fn(frames * fin, 2, |r, c| (r as f64 - 7.0) * (c as f64 + 0.5));
        let (cin, cout, stride) = stack.block_channels(1);
        assert_eq!((cin, cout, stride), (2, 4, 2));
        let y = stack.apply_block(&p, 1, &x, frames, fin);
        let fout = 3;
        assert_eq!(y.shape(), (frames * fout, 4));
        for t in 0..frames {
            for fo in 0..fout {
                for c in 0..4 {
                    let expected = if c < 2 { x[(t * fin + fo * 2, c)] } else { 0.0 };
                    assert_eq!(y[(t * fout + fo, c)], expected);
                }
            }
        }
    }
}
