use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::Params;
use super::resnet::{ResStack, StackCache};
use super::splice::{splice, unsplice};
use super::KinkTracker;
use crate::error::{Error, Result};
use crate::netspec::{validate, Activation, ContextSpec, LayerKind, NetSpec};

/// Variance floor inside statistics pooling.
pub const POOL_VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Features,
    Node(usize),
}

#[derive(Debug, Clone)]
enum FrameOp {
    Affine {
        w: String,
        b: String,
        ctx: ContextSpec,
    },
    Factorized {
        mats: Vec<String>,
        b: String,
        ctxs: Vec<ContextSpec>,
        inner: usize,
    },
    Residual(ResStack),
}

#[derive(Debug, Clone)]
struct FrameNode {
    label: String,
    op: FrameOp,
    inputs: Vec<Source>,
    in_dims: Vec<usize>,
    out_dim: usize,
    act: Activation,
}

#[derive(Debug, Clone)]
struct SegLayer {
    w: String,
    b: String,
    in_dim: usize,
    out_dim: usize,
}

/// Frame-level classifier attached to a non-pooling branch.
#[derive(Debug, Clone)]
pub struct FrameHead {
    pub branch: String,
    pub weight: String,
    pub classes: usize,
    node: usize,
    in_dim: usize,
}

#[derive(Debug, Clone)]
pub struct SpeakerOutput {
    pub weight: String,
    pub classes: usize,
    pub in_dim: usize,
}

/// Executable form of a [`NetSpec`] for a given input feature dimension.
#[derive(Debug, Clone)]
pub struct Plan {
    pub feat_dim: usize,
    nodes: Vec<FrameNode>,
    lookup: BTreeMap<(String, usize), usize>,
    pool_inputs: Vec<usize>,
    pub pool_dim: usize,
    segment: Vec<SegLayer>,
    tap: usize,
    pub output: Option<SpeakerOutput>,
    pub heads: Vec<FrameHead>,
}

fn shape_err(layer: &str, message: impl Into<String>) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        message: message.into(),
    }
}

impl Plan {
    pub fn compile(spec: &NetSpec, feat_dim: usize) -> Result<Self> {
        let report = validate(spec);
        if !report.is_ok() {
            return Err(Error::InvalidInput(format!("invalid network spec:\n{report}")));
        }
        let mut nodes: Vec<FrameNode> = Vec::new();
        let mut lookup = BTreeMap::new();
        for b in &spec.branches {
            for l in b.frame_layers() {
                let key = (b.name.clone(), l.index);
                if let Some(owner) = spec.share_owner(&b.name, l.index) {
                    let id = *lookup
                        .get(&(owner.to_string(), l.index))
                        .ok_or_else(|| shape_err(&format!("{}.{}", b.name, l.index), "shared layer unresolved"))?;
                    lookup.insert(key, id);
                    continue;
                }
                let label = format!("{}.{}", b.name, l.index);
                let mut inputs = Vec::new();
                match b.layers.iter().rfind(|p| p.index < l.index) {
                    None => inputs.push(Source::Features),
                    Some(prev) => inputs.push(Source::Node(lookup[&(b.name.clone(), prev.index)])),
                }
                for &j in &l.skip_inputs {
                    let prev_index = b.layers.iter().rfind(|p| p.index < l.index).map(|p| p.index);
                    if Some(j) == prev_index {
                        continue;
                    }
                    inputs.push(Source::Node(lookup[&(b.name.clone(), j)]));
                }
                let in_dims: Vec<usize> = inputs
                    .iter()
                    .map(|s| match s {
                        Source::Features => feat_dim,
                        Source::Node(i) => nodes[*i].out_dim,
                    })
                    .collect();
                let out_dim = l.size.unwrap();
                let op = match l.kind {
                    LayerKind::Tdnn | LayerKind::Dense => FrameOp::Affine {
                        w: format!("{label}.w"),
                        b: format!("{label}.b"),
                        ctx: l.contexts[0].clone(),
                    },
                    LayerKind::Ftdnn => FrameOp::Factorized {
                        mats: (1..=l.contexts.len()).map(|k| format!("{label}.f{k}")).collect(),
                        b: format!("{label}.b"),
                        ctxs: l.contexts.clone(),
                        inner: l.inner_size.unwrap(),
                    },
                    LayerKind::ResnetBlockStack => {
                        let stack = ResStack::new(&label, l.resnet.as_ref().unwrap());
                        if stack.out_channels != out_dim {
                            return Err(shape_err(&label, "size must equal the last stage's channels"));
                        }
                        FrameOp::Residual(stack)
                    }
                    other => return Err(shape_err(&label, format!("{other} is not a frame-level layer"))),
                };
                nodes.push(FrameNode {
                    label,
                    op,
                    inputs,
                    in_dims,
                    out_dim,
                    act: l.activation,
                });
                lookup.insert(key, nodes.len() - 1);
            }
        }

        let tb = spec.tap_branch()?;
        let pool_at = tb.pooling_index().unwrap();
        let last_frame = tb.layers.iter().rfind(|l| l.index < pool_at).unwrap();
        let mut pool_inputs = vec![lookup[&(tb.name.clone(), last_frame.index)]];
        if let Some(c) = &spec.concat_pool {
            pool_inputs.push(lookup[&(c.branch.clone(), c.layer)]);
        }
        let pool_dim = 2 * pool_inputs.iter().map(|&i| nodes[i].out_dim).sum::<usize>();

        let mut segment = Vec::new();
        let mut tap = None;
        let mut in_dim = pool_dim;
        let mut output = None;
        for l in tb.segment_layers() {
            let label = format!("{}.{}", tb.name, l.index);
            match l.kind {
                LayerKind::Dense | LayerKind::EmbeddingTap => {
                    let out_dim = l.size.unwrap();
                    if l.index == spec.tap.layer {
                        tap = Some(segment.len());
                    }
                    segment.push(SegLayer {
                        w: format!("{label}.w"),
                        b: format!("{label}.b"),
                        in_dim,
                        out_dim,
                    });
                    in_dim = out_dim;
                }
                LayerKind::OutputSoftmax => {
                    let classes = l.size.or_else(|| spec.classes.get(&tb.name).copied());
                    if let Some(classes) = classes {
                        output = Some(SpeakerOutput {
                            weight: format!("{label}.w"),
                            classes,
                            in_dim,
                        });
                    }
                }
                other => return Err(shape_err(&label, format!("{other} cannot follow pooling"))),
            }
        }
        let tap = tap.ok_or_else(|| shape_err("tap", "tap layer is not a segment-level affine layer"))?;

        let mut heads = Vec::new();
        for b in &spec.branches {
            if b.name == tb.name {
                continue;
            }
            if let Some(&classes) = spec.classes.get(&b.name) {
                let last = b.frame_layers().last().ok_or_else(|| shape_err(&b.name, "empty branch"))?;
                let node = lookup[&(b.name.clone(), last.index)];
                heads.push(FrameHead {
                    branch: b.name.clone(),
                    weight: format!("{}.head.w", b.name),
                    classes,
                    node,
                    in_dim: nodes[node].out_dim,
                });
            }
        }

        Ok(Self {
            feat_dim,
            nodes,
            lookup,
            pool_inputs,
            pool_dim,
            segment,
            tap,
            output,
            heads,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.segment[self.tap].out_dim
    }

    /// Names of the semi-orthogonally constrained first factors.
    pub fn constrained_factors(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                FrameOp::Factorized { mats, .. } => Some(mats[0].clone()),
                _ => None,
            })
            .collect()
    }

    /// Expected shape of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut shapes = Vec::new();
        for n in &self.nodes {
            let din: usize = n.in_dims.iter().sum();
            match &n.op {
                FrameOp::Affine { w, b, ctx } => {
                    shapes.push((w.clone(), (n.out_dim, din * ctx.len())));
                    shapes.push((b.clone(), (n.out_dim, 1)));
                }
                FrameOp::Factorized { mats, b, ctxs, inner } => {
                    let inner = *inner;
                    let mut cols = din * ctxs[0].len();
                    for (k, m) in mats.iter().enumerate() {
                        let rows = if k + 1 == mats.len() { n.out_dim } else { inner };
                        shapes.push((m.clone(), (rows, cols)));
                        if k + 1 < mats.len() {
                            cols = inner * ctxs[k + 1].len();
                        }
                    }
                    shapes.push((b.clone(), (n.out_dim, 1)));
                }
                FrameOp::Residual(stack) => shapes.extend(stack.shapes()),
            }
        }
        for s in &self.segment {
            shapes.push((s.w.clone(), (s.out_dim, s.in_dim)));
            shapes.push((s.b.clone(), (s.out_dim, 1)));
        }
        if let Some(o) = &self.output {
            shapes.push((o.weight.clone(), (o.classes, o.in_dim)));
        }
        for h in &self.heads {
            shapes.push((h.weight.clone(), (h.classes, h.in_dim)));
        }
        shapes
    }
}

/// A network specification bound to parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetSpec,
    pub plan: Plan,
    pub params: Params,
}

struct FrameCache {
    spliced: Vec<DMatrix<f64>>,
    pre: DMatrix<f64>,
    out: DMatrix<f64>,
    residual: Option<StackCache>,
}

/// Everything a forward pass produces, including what backpropagation needs.
pub struct ForwardOutput {
    pub frames: usize,
    caches: Vec<FrameCache>,
    pub pool_input: DMatrix<f64>,
    pub pooled: DVector<f64>,
    seg_in: Vec<DVector<f64>>,
    seg_pre: Vec<DVector<f64>>,
    tap_index: usize,
    /// Input to the speaker classifier (post-ReLU output of the last segment layer).
    pub final_hidden: DVector<f64>,
    pub kink_signature: u64,
}

impl ForwardOutput {
    /// Affine output of the tap layer, before its ReLU.
    pub fn tap(&self) -> &DVector<f64> {
        &self.seg_pre[self.tap_index]
    }

    pub fn segment_pre_activations(&self) -> &[DVector<f64>] {
        &self.seg_pre
    }

    pub fn frame_output(&self, plan: &Plan, branch: &str, layer: usize) -> Option<&DMatrix<f64>> {
        plan.lookup
            .get(&(branch.to_string(), layer))
            .map(|&i| &self.caches[i].out)
    }

    pub fn head_input(&self, head: &FrameHead) -> &DMatrix<f64> {
        &self.caches[head.node].out
    }
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for c in 0..m.ncols() {
        let v = b[(c, 0)];
        m.column_mut(c).add_scalar_mut(v);
    }
}

fn hcat(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let rows = parts[0].nrows();
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(p);
        at += p.ncols();
    }
    out
}

fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(m.ncols(), 1, m.column_iter().map(|c| c.sum()))
}

/// Per-dimension mean followed by per-dimension standard deviation,
/// `sqrt(max(E[x^2] - E[x]^2, floor))`.
pub fn stats_pool(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (frames, dim) = x.shape();
    if frames == 0 {
        return Err(Error::EmptyInput("statistics pooling over zero frames".into()));
    }
    let n = frames as f64;
    let mut out = DVector::zeros(2 * dim);
    for (j, col) in x.column_iter().enumerate() {
        let mean = col.sum() / n;
        let sq = col.iter().map(|v| v * v).sum::<f64>() / n;
        out[j] = mean;
        out[dim + j] = (sq - mean * mean).max(POOL_VARIANCE_FLOOR).sqrt();
    }
    Ok(out)
}

fn stats_pool_backward(x: &DMatrix<f64>, pooled: &DVector<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let (frames, dim) = x.shape();
    let n = frames as f64;
    let mut dx = DMatrix::zeros(frames, dim);
    for j in 0..dim {
        let mean = pooled[j];
        let std = pooled[dim + j];
        let var = x.column(j).iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        let live = var > POOL_VARIANCE_FLOOR;
        for t in 0..frames {
            let mut g = d[j] / n;
            if live {
                g += d[dim + j] * (x[(t, j)] - mean) / (n * std);
            }
            dx[(t, j)] = g;
        }
    }
    dx
}

fn seg_affine(p: &Params, s: &SegLayer, x: &DVector<f64>) -> DVector<f64> {
    let b = p.tensor(&s.b);
    p.tensor(&s.w) * x + DVector::from_column_slice(b.as_slice())
}

impl Network {
    pub fn new(spec: NetSpec, feat_dim: usize, params: Params) -> Result<Self> {
        let plan = Plan::compile(&spec, feat_dim)?;
        for (name, shape) in plan.param_shapes() {
            match params.get(&name) {
                None => return Err(shape_err(&name, "parameter missing")),
                Some(t) if t.shape() != shape => {
                    return Err(shape_err(
                        &name,
                        format!("expected {:?}, found {:?}", shape, t.shape()),
                    ))
                }
                _ => {}
            }
        }
        Ok(Self { spec, plan, params })
    }

    /// Random initialization: He-scaled weights for rectified layers, unit-variance
    /// scaling for linear factors and classifiers, zero biases.
    pub fn init(spec: NetSpec, feat_dim: usize, seed: u64) -> Result<Self> {
        let plan = Plan::compile(&spec, feat_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for n in &plan.nodes {
            if let FrameOp::Residual(stack) = &n.op {
                stack.init(&mut params, &mut rng);
            }
        }
        let linear: Vec<String> = plan
            .nodes
            .iter()
            .flat_map(|n| match &n.op {
                FrameOp::Factorized { mats, .. } => mats[..mats.len() - 1].to_vec(),
                _ => Vec::new(),
            })
            .chain(plan.output.iter().map(|o| o.weight.clone()))
            .chain(plan.heads.iter().map(|h| h.weight.clone()))
            .collect();
        for (name, (rows, cols)) in plan.param_shapes() {
            if params.get(&name).is_some() {
                continue;
            }
            let t = if name.ends_with(".b") {
                DMatrix::zeros(rows, cols)
            } else {
                let gain = if linear.contains(&name) { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / cols as f64).sqrt()).unwrap();
                DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
            };
            params.insert(name, t);
        }
        Ok(Self { spec, plan, params })
    }

    pub fn embedding_dim(&self) -> usize {
        self.plan.embedding_dim()
    }

    pub fn forward(&self, feats: &DMatrix<f64>) -> Result<ForwardOutput> {
        self.forward_tracked(feats, false)
    }

    pub fn forward_tracked(&self, feats: &DMatrix<f64>, track_kinks: bool) -> Result<ForwardOutput> {
        let plan = &self.plan;
        let p = &self.params;
        let frames = feats.nrows();
        if frames == 0 {
            return Err(Error::EmptyInput("no frames to process".into()));
        }
        if feats.ncols() != plan.feat_dim {
            let first = plan.nodes.first().map_or("input", |n| n.label.as_str());
            return Err(shape_err(
                first,
                format!("expected {}-dimensional features, got {}", plan.feat_dim, feats.ncols()),
            ));
        }
        let mut kinks = KinkTracker::new(track_kinks);
        let mut caches: Vec<FrameCache> = Vec::with_capacity(plan.nodes.len());
        for n in &plan.nodes {
            let parts: Vec<&DMatrix<f64>> = n
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Features => feats,
                    Source::Node(i) => &caches[*i].out,
                })
                .collect();
            let input = hcat(&parts);
            let mut spliced = Vec::new();
            let mut residual = None;
            let pre = match &n.op {
                FrameOp::Affine { w, b, ctx } => {
                    let s = splice(&input, ctx);
                    let mut z = &s * p.tensor(w).transpose();
                    add_row_bias(&mut z, p.tensor(b));
                    spliced.push(s);
                    z
                }
                FrameOp::Factorized { mats, b, ctxs, .. } => {
                    let mut h = input.clone();
                    for (m, ctx) in mats.iter().zip(ctxs) {
                        let s = splice(&h, ctx);
                        h = &s * p.tensor(m).transpose();
                        spliced.push(s);
                    }
                    add_row_bias(&mut h, p.tensor(b));
                    h
                }
                FrameOp::Residual(stack) => {
                    let (out, cache) = stack.forward(p, &input, &mut kinks);
                    residual = Some(cache);
                    out
                }
            };
            let out = match (n.act, &n.op) {
                // the residual stack rectifies internally
                (_, FrameOp::Residual(_)) | (Activation::Linear, _) => pre.clone(),
                (Activation::Relu, _) => {
                    kinks.observe(&pre);
                    pre.map(|v| v.max(0.0))
                }
            };
            caches.push(FrameCache {
                spliced,
                pre,
                out,
                residual,
            });
        }

        let pool_parts: Vec<&DMatrix<f64>> = plan.pool_inputs.iter().map(|&i| &caches[i].out).collect();
        let pool_input = hcat(&pool_parts);
        let pooled = stats_pool(&pool_input)?;
        let mut seg_in = Vec::with_capacity(plan.segment.len());
        let mut seg_pre = Vec::with_capacity(plan.segment.len());
        let mut h = pooled.clone();
        for s in &plan.segment {
            let z = seg_affine(p, s, &h);
            kinks.observe_vec(&z);
            seg_in.push(std::mem::replace(&mut h, z.map(|v| v.max(0.0))));
            seg_pre.push(z);
        }
        Ok(ForwardOutput {
            frames,
            caches,
            pool_input,
            pooled,
            seg_in,
            seg_pre,
            tap_index: plan.tap,
            final_hidden: h,
            kink_signature: kinks.signature(),
        })
    }

    /// Applies the ReLU after the tap and every later segment layer to a tap
    /// pre-activation, yielding the classifier input.
    pub fn forward_from_tap(&self, tap: &DVector<f64>) -> DVector<f64> {
        let mut h = tap.map(|v| v.max(0.0));
        for s in &self.plan.segment[self.plan.tap + 1..] {
            h = seg_affine(&self.params, s, &h).map(|v| v.max(0.0));
        }
        h
    }

    /// Backpropagates gradients with respect to the classifier input and the
    /// frame-head inputs, accumulating parameter gradients into `grads`.
    pub fn backward(
        &self,
        fwd: &ForwardOutput,
        d_final: Option<&DVector<f64>>,
        d_heads: &[(usize, DMatrix<f64>)],
        grads: &mut Params,
    ) {
        let plan = &self.plan;
        let p = &self.params;
        let mut d_nodes: Vec<Option<DMatrix<f64>>> = vec![None; plan.nodes.len()];
        let add = |slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>| match slot {
            Some(acc) => *acc += g,
            None => *slot = Some(g),
        };

        if let Some(d_final) = d_final {
            let mut dh = d_final.clone();
            for (k, s) in plan.segment.iter().enumerate().rev() {
                let dz = dh.zip_map(&fwd.seg_pre[k], |g, z| if z > 0.0 { g } else { 0.0 });
                grads.accumulate(&s.w, &(&dz * fwd.seg_in[k].transpose()));
                grads.accumulate(&s.b, &DMatrix::from_column_slice(dz.len(), 1, dz.as_slice()));
                dh = p.tensor(&s.w).tr_mul(&dz);
            }
            let dx = stats_pool_backward(&fwd.pool_input, &fwd.pooled, &dh);
            let mut at = 0;
            for &i in &plan.pool_inputs {
                let w = plan.nodes[i].out_dim;
                add(&mut d_nodes[i], dx.columns(at, w).into_owned());
                at += w;
            }
        }
        for (h, g) in d_heads {
            let node = plan.heads[*h].node;
            add(&mut d_nodes[node], g.clone());
        }

        for (i, n) in plan.nodes.iter().enumerate().rev() {
            let Some(dout) = d_nodes[i].take() else { continue };
            let c = &fwd.caches[i];
            let din: usize = n.in_dims.iter().sum();
            let dx = match &n.op {
                FrameOp::Residual(stack) => {
                    stack.backward(p, c.residual.as_ref().unwrap(), &dout, grads);
                    None
                }
                op => {
                    let dz = match n.act {
                        Activation::Relu => dout.zip_map(&c.pre, |g, z| if z > 0.0 { g } else { 0.0 }),
                        Activation::Linear => dout,
                    };
                    match op {
                        FrameOp::Affine { w, b, ctx } => {
                            grads.accumulate(w, &(dz.transpose() * &c.spliced[0]));
                            grads.accumulate(b, &col_sums(&dz));
                            let ds = &dz * p.tensor(w);
                            Some(unsplice(&ds, ctx, din))
                        }
                        FrameOp::Factorized { mats, b, ctxs, .. } => {
                            grads.accumulate(b, &col_sums(&dz));
                            let mut dh = dz;
                            for k in (0..mats.len()).rev() {
                                grads.accumulate(&mats[k], &(dh.transpose() * &c.spliced[k]));
                                let ds = &dh * p.tensor(&mats[k]);
                                let width = if k == 0 { din } else { ds.ncols() / ctxs[k].len() };
                                dh = unsplice(&ds, &ctxs[k], width);
                            }
                            Some(dh)
                        }
                        FrameOp::Residual(_) => unreachable!(),
                    }
                }
            };
            if let Some(dx) = dx {
                let mut at = 0;
                for (s, &w) in n.inputs.iter().zip(&n.in_dims) {
                    if let Source::Node(j) = s {
                        add(&mut d_nodes[*j], dx.columns(at, w).into_owned());
                    }
                    at += w;
                }
            }
        }
    }

    pub fn residual_stack(&self, branch: &str, layer: usize) -> Option<&ResStack> {
        let i = *self.plan.lookup.get(&(branch.to_string(), layer))?;
        match &self.plan.nodes[i].op {
            FrameOp::Residual(s) => Some(s),
            _ => None,
        }
    }
}
