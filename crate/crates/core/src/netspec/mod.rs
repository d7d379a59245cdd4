//! Line-oriented description of embedding network graphs.
//!
//! ```text
//! name etdnn
//! branch xvector
//! 1 tdnn f1=t-2:t+2 size=512
//! 2 dense f1=t size=512
//! ...
//! 11 pooling size=3000
//! 12 embedding_tap size=512
//! tap xvector 12
//! ```
//!
//! Besides layer lines, a spec carries `share`, `concat_pool`, `tap` and
//! `classes` directives. Layers of a branch are numbered from 1; layer 1
//! of every branch consumes the acoustic features.

mod builtin;
mod context;
mod parse;
mod validate;

pub use builtin::{builtin, BUILTIN_NAMES};
pub use context::{parse_context, render_context, ContextSpec};
pub use parse::{parse_netspec, render_netspec};
pub use validate::{receptive_field, validate, ValidationReport, Violation};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Tdnn,
    Dense,
    Ftdnn,
    ResnetBlockStack,
    Pooling,
    EmbeddingTap,
    OutputSoftmax,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Tdnn => "tdnn",
            LayerKind::Dense => "dense",
            LayerKind::Ftdnn => "ftdnn",
            LayerKind::ResnetBlockStack => "resnet_block_stack",
            LayerKind::Pooling => "pooling",
            LayerKind::EmbeddingTap => "embedding_tap",
            LayerKind::OutputSoftmax => "output_softmax",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "tdnn" => LayerKind::Tdnn,
            "dense" => LayerKind::Dense,
            "ftdnn" => LayerKind::Ftdnn,
            "resnet_block_stack" => LayerKind::ResnetBlockStack,
            "pooling" => LayerKind::Pooling,
            "embedding_tap" => LayerKind::EmbeddingTap,
            "output_softmax" => LayerKind::OutputSoftmax,
            other => return Err(format!("unknown layer kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Relu,
    Linear,
}

/// Stage layout of a residual stack: output channels and block count per stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResnetShape {
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
}

impl ResnetShape {
    pub fn resnet34() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
        }
    }

    /// Number of 3×3 convolutions along the main path (stem + two per block).
    pub fn conv_depth(&self) -> usize {
        1 + 2 * self.blocks.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    /// One context per factor; frame-level affine layers carry exactly one.
    pub contexts: Vec<ContextSpec>,
    pub skip_inputs: Vec<usize>,
    pub size: Option<usize>,
    pub inner_size: Option<usize>,
    pub activation: Activation,
    pub resnet: Option<ResnetShape>,
}

impl LayerSpec {
    pub fn new(index: usize, kind: LayerKind) -> Self {
        Self {
            index,
            kind,
            contexts: Vec::new(),
            skip_inputs: Vec::new(),
            size: None,
            inner_size: None,
            activation: Activation::Relu,
            resnet: None,
        }
    }

    /// Summed (min, max) offsets over all factor contexts.
    pub fn context_extent(&self) -> (i64, i64) {
        if let Some(shape) = &self.resnet {
            let d = shape.conv_depth() as i64;
            return (-d, d);
        }
        self.contexts.iter().fold((0, 0), |(lo, hi), c| {
            (lo + c.min() as i64, hi + c.max() as i64)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Branch {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl Branch {
    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.index == index)
    }

    pub fn pooling_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .find(|l| l.kind == LayerKind::Pooling)
            .map(|l| l.index)
    }

    /// Layers before pooling (all layers when the branch does not pool).
    pub fn frame_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        let cut = self.pooling_index().unwrap_or(usize::MAX);
        self.layers.iter().filter(move |l| l.index < cut)
    }

    pub fn segment_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        let cut = self.pooling_index();
        self.layers
            .iter()
            .filter(move |l| cut.is_some_and(|p| l.index > p))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerRef {
    pub branch: String,
    pub layer: usize,
}

impl LayerRef {
    pub fn new(branch: &str, layer: usize) -> Self {
        Self {
            branch: branch.to_string(),
            layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SharedLayer {
    pub branch_a: String,
    pub branch_b: String,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub name: String,
    pub branches: Vec<Branch>,
    pub shared: Vec<SharedLayer>,
    pub concat_pool: Option<LayerRef>,
    pub tap: LayerRef,
    pub classes: BTreeMap<String, usize>,
}

impl NetSpec {
    pub fn branch(&self, name: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.name == name)
    }

    pub fn layer(&self, r: &LayerRef) -> Option<&LayerSpec> {
        self.branch(&r.branch).and_then(|b| b.layer(r.layer))
    }

    /// The branch that pools and emits the embedding.
    pub fn tap_branch(&self) -> Result<&Branch> {
        self.branch(&self.tap.branch)
            .ok_or_else(|| Error::InvalidInput(format!("tap branch `{}` missing", self.tap.branch)))
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.layer(&self.tap).and_then(|l| l.size)
    }

    pub fn pooled_dim(&self) -> Option<usize> {
        let b = self.branch(&self.tap.branch)?;
        b.layer(b.pooling_index()?)?.size
    }

    /// If branch `b` layer `index` is declared shared, the branch that owns
    /// its parameters (the one declared first).
    pub fn share_owner(&self, branch: &str, index: usize) -> Option<&str> {
        let order = |name: &str| self.branches.iter().position(|b| b.name == name);
        self.shared
            .iter()
            .filter(|s| s.layer == index && (s.branch_a == branch || s.branch_b == branch))
            .map(|s| {
                let other = if s.branch_a == branch { &s.branch_b } else { &s.branch_a };
                other.as_str()
            })
            .filter(|other| order(other) < order(branch))
            .min_by_key(|other| order(other))
    }

    pub fn with_classes(mut self, branch: &str, n: usize) -> Self {
        self.classes.insert(branch.to_string(), n);
        self
    }

    /// Multiplies every layer width (and residual channel count) by `factor`,
    /// keeping at least one unit per layer. Pooling sizes are recomputed from
    /// their scaled inputs; class counts are left alone.
    pub fn scaled(&self, factor: f64) -> NetSpec {
        let scale = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        let mut out = self.clone();
        for b in &mut out.branches {
            for l in &mut b.layers {
                if l.kind == LayerKind::OutputSoftmax || l.kind == LayerKind::Pooling {
                    continue;
                }
                l.size = l.size.map(scale);
                l.inner_size = l.inner_size.map(scale);
                if let Some(shape) = &mut l.resnet {
                    shape.channels.iter_mut().for_each(|c| *c = scale(*c));
                    l.size = shape.channels.last().copied();
                }
            }
        }
        let concat = out
            .concat_pool
            .as_ref()
            .and_then(|r| out.layer(r))
            .and_then(|l| l.size)
            .unwrap_or(0);
        let concat_branch = out.concat_pool.as_ref().map(|r| r.branch.clone());
        for b in &mut out.branches {
            if let Some(p) = b.pooling_index() {
                let prev = b.layers.iter().rfind(|l| l.index < p).and_then(|l| l.size);
                let extra = if concat_branch.as_deref() != Some(b.name.as_str()) {
                    concat
                } else {
                    0
                };
                if let Some(prev) = prev {
                    let pool = b.layers.iter_mut().find(|l| l.index == p).unwrap();
                    pool.size = Some(2 * (prev + extra));
                }
            }
        }
        out
    }
}
