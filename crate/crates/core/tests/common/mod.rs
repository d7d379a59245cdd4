//! Shared oracles and reference tables for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use xvec::backend::PldaModel;
use xvec::netspec::{LayerKind, NetSpec};

// ---------------------------------------------------------------------------
// Reference architectures written out row by row, independently of the
// builtin definitions. Context cells use the `t-2:t+2` / `t-3,t,t+3` notation.

pub struct Row {
    pub index: usize,
    pub kind: LayerKind,
    pub contexts: &'static [&'static str],
    pub from: &'static [usize],
    pub size: Option<usize>,
    pub inner: Option<usize>,
}

const fn row(
    index: usize,
    kind: LayerKind,
    contexts: &'static [&'static str],
    from: &'static [usize],
    size: Option<usize>,
    inner: Option<usize>,
) -> Row {
    Row {
        index,
        kind,
        contexts,
        from,
        size,
        inner,
    }
}

use LayerKind::{Dense, EmbeddingTap as Emb, Ftdnn, OutputSoftmax as Out, Pooling, Tdnn};

pub const ETDNN: &[Row] = &[
    row(1, Tdnn, &["t-2:t+2"], &[], Some(512), None),
    row(2, Dense, &["t"], &[], Some(512), None),
    row(3, Tdnn, &["t-2,t,t+2"], &[], Some(512), None),
    row(4, Dense, &["t"], &[], Some(512), None),
    row(5, Tdnn, &["t-3:t+3"], &[], Some(512), None),
    row(6, Dense, &["t"], &[], Some(512), None),
    row(7, Tdnn, &["t-4,t,t+4"], &[], Some(512), None),
    row(8, Dense, &["t"], &[], Some(512), None),
    row(9, Dense, &["t"], &[], Some(512), None),
    row(10, Dense, &["t"], &[], Some(1500), None),
    row(11, Pooling, &[], &[], Some(2 * 1500), None),
    row(12, Emb, &[], &[], Some(512), None),
    row(13, Dense, &[], &[], Some(512), None),
    row(14, Out, &[], &[], None, None),
];

// Row 10 lists `t` under both context columns; a dense layer has a single
// affine map, so one `t` context is expected.
pub const FTDNN: &[Row] = &[
    row(1, Tdnn, &["t-2:t+2"], &[], Some(512), None),
    row(2, Ftdnn, &["t-2,t", "t,t+2"], &[], Some(1024), Some(256)),
    row(3, Ftdnn, &["t", "t"], &[], Some(1024), Some(256)),
    row(4, Ftdnn, &["t-3,t", "t,t+3"], &[], Some(1024), Some(256)),
    row(5, Ftdnn, &["t", "t"], &[3], Some(1024), Some(256)),
    row(6, Ftdnn, &["t-3,t", "t,t+3"], &[], Some(1024), Some(256)),
    row(7, Ftdnn, &["t-3,t", "t,t+3"], &[2, 4], Some(1024), Some(256)),
    row(8, Ftdnn, &["t-3,t", "t,t+3"], &[], Some(1024), Some(256)),
    row(9, Ftdnn, &["t-3,t", "t,t+3"], &[4, 6, 8], Some(1024), Some(256)),
    row(10, Dense, &["t"], &[], Some(2048), None),
    row(11, Pooling, &[], &[], Some(4096), None),
    row(12, Emb, &[], &[], Some(1024), None),
    row(13, Dense, &[], &[], Some(1024), None),
    row(14, Out, &[], &[], None, None),
];

const F3_WIDE: &[&str] = &["t-5,t-2", "t-2,t+1", "t+1,t+4"];
const F3_CUR: &[&str] = &["t", "t", "t"];

pub const EFTDNN: &[Row] = &[
    row(1, Tdnn, &["t-2:t+2"], &[], Some(512), None),
    row(2, Dense, &[], &[], Some(512), None),
    row(3, Ftdnn, &["t-3,t-1", "t-1,t+1", "t+1,t+3"], &[], Some(1024), Some(256)),
    row(4, Dense, &[], &[], Some(1024), None),
    row(5, Ftdnn, F3_CUR, &[], Some(1024), Some(256)),
    row(6, Dense, &[], &[], Some(1024), None),
    row(7, Ftdnn, F3_WIDE, &[], Some(1024), Some(256)),
    row(8, Dense, &[], &[], Some(1024), None),
    row(9, Ftdnn, F3_CUR, &[5], Some(1024), Some(256)),
    row(10, Dense, &[], &[], Some(1024), None),
    row(11, Ftdnn, F3_WIDE, &[], Some(1024), Some(256)),
    row(12, Dense, &[], &[], Some(1024), None),
    row(13, Ftdnn, F3_WIDE, &[3, 7], Some(1024), Some(256)),
    row(14, Dense, &[], &[], Some(1024), None),
    row(15, Ftdnn, F3_WIDE, &[], Some(1024), Some(256)),
    row(16, Dense, &[], &[], Some(1024), None),
    row(17, Ftdnn, F3_CUR, &[7, 11, 15], Some(1024), Some(256)),
    row(18, Dense, &["t"], &[], Some(2048), None),
    row(19, Dense, &["t"], &[], Some(2048), None),
    row(20, Dense, &["t"], &[], Some(2048), None),
    row(21, Pooling, &[], &[], Some(4096), None),
    row(22, Emb, &[], &[], Some(1024), None),
    row(23, Dense, &[], &[], Some(1024), None),
    row(24, Out, &[], &[], None, None),
];

/// Frame-level x-vector branch of the multitask and c-vector networks.
pub const MULTITASK_XVECTOR_FRAMES: &[Row] = &[
    row(1, Tdnn, &["t-2:t+2"], &[], Some(512), None),
    row(2, Dense, &["t"], &[], Some(512), None),
    row(3, Tdnn, &["t-2,t,t+2"], &[], Some(512), None),
    row(4, Dense, &["t"], &[], Some(512), None),
    row(5, Tdnn, &["t-3,t,t+3"], &[], Some(512), None),
    row(6, Dense, &["t"], &[], Some(512), None),
    row(7, Tdnn, &["t-4,t,t+4"], &[], Some(512), None),
    row(8, Dense, &["t"], &[], Some(512), None),
    row(9, Dense, &["t"], &[], Some(512), None),
    row(10, Dense, &["t"], &[], Some(1500), None),
];

pub const MULTITASK_ASR: &[Row] = &[
    row(1, Tdnn, &["t-2:t+2"], &[], Some(512), None),
    row(2, Tdnn, &["t-2,t,t+2"], &[], Some(512), None),
    row(3, Tdnn, &["t-3,t,t+3"], &[], Some(512), None),
    row(4, Dense, &["t"], &[], Some(512), None),
    row(5, Dense, &["t"], &[], Some(512), None),
    row(6, Dense, &["t"], &[], Some(512), None),
    row(7, Dense, &["t"], &[], Some(512), None),
];

pub const CVECTOR_BOTTLENECK: &[Row] = &[
    row(1, Tdnn, &["t-2:t+2"], &[], Some(650), None),
    row(2, Tdnn, &["t-1:t+1"], &[], Some(650), None),
    row(3, Tdnn, &["t-1:t+1"], &[], Some(650), None),
    row(4, Tdnn, &["t-3,t,t+3"], &[], Some(650), None),
    row(5, Tdnn, &["t-6,t-3,t"], &[], Some(128), None),
];

/// Offsets of a table context cell.
pub fn offsets(cell: &str) -> Vec<i32> {
    let term = |s: &str| -> i32 {
        let s = s.trim();
        match s.strip_prefix('t') {
            Some("") => 0,
            Some(rest) => rest.replace(' ', "").parse().unwrap(),
            None => panic!("bad context term {s}"),
        }
    };
    if let Some((a, b)) = cell.split_once(':') {
        (term(a)..=term(b)).collect()
    } else {
        cell.split(',').map(term).collect()
    }
}

/// Differences between `rows` and branch `branch` of `spec`, layer by layer.
pub fn compare_rows(spec: &NetSpec, branch: &str, rows: &[Row], mismatches: &mut Vec<String>) {
    let Some(b) = spec.branch(branch) else {
        mismatches.push(format!("{}: no branch {branch}", spec.name));
        return;
    };
    let frame_count = b.layers.len().min(rows.len());
    for r in &rows[..frame_count] {
        let at = format!("{}/{branch}/{}", spec.name, r.index);
        let Some(l) = b.layer(r.index) else {
            mismatches.push(format!("{at}: missing"));
            continue;
        };
        if l.kind != r.kind {
            mismatches.push(format!("{at}: kind {} vs {}", l.kind, r.kind));
        }
        let got: Vec<Vec<i32>> = l.contexts.iter().map(|c| c.offsets().to_vec()).collect();
        let mut want: Vec<Vec<i32>> = r.contexts.iter().map(|c| offsets(c)).collect();
        // a blank cell on a dense row is the current frame
        if want.is_empty() && r.kind == Dense {
            want = vec![vec![0]];
        }
        if got != want {
            mismatches.push(format!("{at}: contexts {got:?} vs {want:?}"));
        }
        if l.skip_inputs != r.from {
            mismatches.push(format!("{at}: from {:?} vs {:?}", l.skip_inputs, r.from));
        }
        if l.size != r.size {
            mismatches.push(format!("{at}: size {:?} vs {:?}", l.size, r.size));
        }
        if l.inner_size != r.inner {
            mismatches.push(format!("{at}: inner {:?} vs {:?}", l.inner_size, r.inner));
        }
    }
}

/// Every cell of the six reference architectures; empty when all match.
pub fn golden_mismatches() -> Vec<String> {
    use xvec::netspec::builtin;
    let mut m = Vec::new();
    let expect_len = |spec: &NetSpec, branch: &str, n: usize, m: &mut Vec<String>| {
        let got = spec.branch(branch).map_or(0, |b| b.layers.len());
        if got != n {
            m.push(format!("{}/{branch}: {got} layers, expected {n}", spec.name));
        }
    };
    let dims = |spec: &NetSpec, pooled: usize, emb: usize, m: &mut Vec<String>| {
        if spec.pooled_dim() != Some(pooled) {
            m.push(format!("{}: pooled {:?}, expected {pooled}", spec.name, spec.pooled_dim()));
        }
        if spec.embedding_dim() != Some(emb) {
            m.push(format!("{}: embedding {:?}, expected {emb}", spec.name, spec.embedding_dim()));
        }
    };

    let e = builtin("etdnn").unwrap();
    expect_len(&e, "xvector", 14, &mut m);
    compare_rows(&e, "xvector", ETDNN, &mut m);
    dims(&e, 3000, 512, &mut m);
    if e.tap.layer != 12 {
        m.push("etdnn: embedding not at layer 12".into());
    }

    let f = builtin("ftdnn").unwrap();
    expect_len(&f, "xvector", 14, &mut m);
    compare_rows(&f, "xvector", FTDNN, &mut m);
    dims(&f, 4096, 1024, &mut m);
    if f.tap.layer != 12 {
        m.push("ftdnn: embedding not at layer 12".into());
    }

    let x = builtin("eftdnn").unwrap();
    expect_len(&x, "xvector", 24, &mut m);
    compare_rows(&x, "xvector", EFTDNN, &mut m);
    dims(&x, 4096, 1024, &mut m);
    if x.tap.layer != 22 {
        m.push("eftdnn: embedding not at layer 22".into());
    }

    let segment_tail = |spec: &NetSpec, first: usize, pooled: usize, m: &mut Vec<String>| {
        let rows = [
            row(first, Pooling, &[], &[], Some(pooled), None),
            row(first + 1, Emb, &[], &[], Some(512), None),
            row(first + 2, Dense, &[], &[], Some(512), None),
            row(first + 3, Out, &[], &[], None, None),
        ];
        let b = spec.branch("xvector").unwrap();
        for r in rows {
            match b.layer(r.index) {
                Some(l)
                    if l.kind == r.kind
                        && l.size == r.size
                        && l.contexts.iter().all(|c| c.is_current()) => {}
                other => m.push(format!("{}/xvector/{}: {:?}", spec.name, r.index, other.map(|l| (l.kind, l.size)))),
            }
        }
    };

    for name in ["multitask", "cvector"] {
        let s = builtin(name).unwrap();
        expect_len(&s, "xvector", 14, &mut m);
        compare_rows(&s, "xvector", MULTITASK_XVECTOR_FRAMES, &mut m);
        expect_len(&s, "asr", 7, &mut m);
        compare_rows(&s, "asr", MULTITASK_ASR, &mut m);
        // only the first TDNN layer is shared
        let shared: Vec<usize> = s.shared.iter().map(|x| x.layer).collect();
        if shared != [1] || s.shared[0].branch_a != "xvector" || s.shared[0].branch_b != "asr" {
            m.push(format!("{name}: shared layers {shared:?}"));
        }
        if s.classes.get("asr") != Some(&3800) {
            m.push(format!("{name}: senones {:?}", s.classes.get("asr")));
        }
    }
    let mt = builtin("multitask").unwrap();
    segment_tail(&mt, 11, 3000, &mut m);
    dims(&mt, 3000, 512, &mut m);

    let cv = builtin("cvector").unwrap();
    expect_len(&cv, "bottleneck", 5, &mut m);
    compare_rows(&cv, "bottleneck", CVECTOR_BOTTLENECK, &mut m);
    // pooling over x-vector frames ⊕ bottleneck output: 2 × (1500 + 128)
    segment_tail(&cv, 11, 2 * (1500 + 128), &mut m);
    dims(&cv, 3256, 512, &mut m);
    match &cv.concat_pool {
        Some(r) if r.branch == "bottleneck" && r.layer == 5 => {}
        other => m.push(format!("cvector: concat into pooling from {other:?}")),
    }

    let r = builtin("resnet").unwrap();
    let b = r.branch("xvector").unwrap();
    let stack = b.layer(1).and_then(|l| l.resnet.clone());
    match stack {
        Some(s) if s.channels == [64, 128, 256, 512] && s.blocks == [3, 4, 6, 3] => {}
        other => m.push(format!("resnet: ResNet34 stack {other:?}")),
    }
    if b.layer(1).and_then(|l| l.size) != Some(512) {
        m.push("resnet: stack is not 512 nodes".into());
    }
    for (i, size) in [(2, 512), (3, 1000)] {
        if b.layer(i).map(|l| (l.kind, l.size)) != Some((Dense, Some(size))) {
            m.push(format!("resnet/{i}: expected dense {size}"));
        }
    }
    segment_tail(&r, 4, 2000, &mut m);
    dims(&r, 2000, 512, &mut m);
    m
}

// ---------------------------------------------------------------------------
// Detection-metric oracles: every threshold evaluated by direct counting.

/// `(P_miss, P_fa)` at each candidate threshold, ascending, accepting `s ≥ θ`.
pub fn sweep(tar: &[f64], non: &[f64]) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = tar.iter().chain(non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let nt = tar.len() as f64;
    let nn = non.len() as f64;
    thresholds
        .iter()
        .map(|&th| {
            let miss = tar.iter().filter(|&&s| s < th).count() as f64 / nt;
            let fa = non.iter().filter(|&&s| s >= th).count() as f64 / nn;
            (miss, fa)
        })
        .collect()
}

pub fn eer_oracle(tar: &[f64], non: &[f64]) -> f64 {
    let pts = sweep(tar, non);
    for w in pts.windows(2) {
        let ((m1, f1), (m2, f2)) = (w[0], w[1]);
        if m1 <= f1 && m2 >= f2 {
            // intersect the segment with P_miss = P_fa
            let d1 = f1 - m1;
            let d2 = m2 - f2;
            if d1 + d2 == 0.0 {
                return 100.0 * m1;
            }
            let t = d1 / (d1 + d2);
            return 100.0 * (m1 + t * (m2 - m1));
        }
    }
    unreachable!()
}

pub fn min_dcf_oracle(tar: &[f64], non: &[f64], p: f64) -> f64 {
    let norm = p.min(1.0 - p);
    sweep(tar, non)
        .into_iter()
        .map(|(m, f)| (p * m + (1.0 - p) * f) / norm)
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Isotonic regression by exhaustive search over contiguous partitions.

/// The non-decreasing sequence closest to `y` in squared error. Any
/// isotonic optimum is piecewise constant at block means, so trying every
/// partition into contiguous blocks finds it.
pub fn isotonic_oracle(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        for i in 0..n {
            let last = i == n - 1 || cuts & (1 << i) != 0;
            if last {
                let block = &y[start..=i];
                let mean = block.iter().sum::<f64>() / block.len() as f64;
                fit.extend(std::iter::repeat_n(mean, block.len()));
                start = i + 1;
            }
        }
        if fit.windows(2).any(|w| w[0] > w[1] + 1e-15) {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b - 1e-15) {
            best = Some((sse, fit));
        }
    }
    best.unwrap().1
}

// ---------------------------------------------------------------------------
// PLDA verification ratio from the joint Gaussian of the two observations.

fn log_gauss(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let chol = cov.clone().cholesky().expect("covariance must be positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sol = chol.solve(x);
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + x.dot(&sol))
}

/// `log p(e, t | same) − log p(e, t | different)`.
pub fn plda_oracle(m: &PldaModel, e: &DVector<f64>, t: &DVector<f64>) -> f64 {
    let d = m.mean.len();
    let total = &m.between + &m.within;
    let mut joint = DMatrix::zeros(2 * d, 2 * d);
    joint.view_mut((0, 0), (d, d)).copy_from(&total);
    joint.view_mut((d, d), (d, d)).copy_from(&total);
    joint.view_mut((0, d), (d, d)).copy_from(&m.between);
    joint.view_mut((d, 0), (d, d)).copy_from(&m.between);
    let mut x = DVector::zeros(2 * d);
    x.rows_mut(0, d).copy_from(&(e - &m.mean));
    x.rows_mut(d, d).copy_from(&(t - &m.mean));
    log_gauss(&x, &joint) - log_gauss(&(e - &m.mean), &total) - log_gauss(&(t - &m.mean), &total)
}

/// Random symmetric positive-definite matrix `A Aᵀ + εI`.
pub fn random_spd(d: usize, eps: f64, next: &mut impl FnMut() -> f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| next());
    &a * a.transpose() + DMatrix::identity(d, d) * eps
}
