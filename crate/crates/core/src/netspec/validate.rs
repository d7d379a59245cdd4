use std::collections::BTreeMap;
use std::fmt;

use super::{Branch, LayerKind, NetSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{}: {}", v.location, v.message)?;
        }
        Ok(())
    }
}

fn loc(branch: &str, index: usize) -> String {
    format!("{branch}.{index}")
}

fn check_branch(n: &NetSpec, b: &Branch, report: &mut ValidationReport) {
    for (pos, l) in b.layers.iter().enumerate() {
        if l.index != pos + 1 {
            report.push(loc(&b.name, l.index), format!("expected layer index {}", pos + 1));
        }
    }
    let pooling: Vec<usize> = b
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Pooling)
        .map(|l| l.index)
        .collect();
    let emits = n.tap.branch == b.name;
    match (emits, pooling.len()) {
        (true, 1) | (false, 0) => {}
        (true, k) => report.push(&b.name, format!("embedding branch has {k} pooling layers, expected 1")),
        (false, k) => report.push(&b.name, format!("non-embedding branch has {k} pooling layers")),
    }
    let pool_at = pooling.first().copied();

    for l in &b.layers {
        let at = loc(&b.name, l.index);
        let frame_level = pool_at.is_none_or(|p| l.index < p);
        if (l.kind == LayerKind::Ftdnn) != l.inner_size.is_some() {
            report.push(&at, "inner size must be present exactly for ftdnn layers");
        }
        match l.kind {
            LayerKind::Tdnn | LayerKind::Dense => {
                if l.contexts.len() != 1 {
                    report.push(&at, "expected exactly one context");
                }
            }
            LayerKind::Ftdnn => {
                if !(2..=3).contains(&l.contexts.len()) {
                    report.push(&at, "ftdnn needs two or three factor contexts");
                }
            }
            _ => {
                if !l.contexts.is_empty() {
                    report.push(&at, format!("{} takes no context", l.kind));
                }
            }
        }
        if frame_level {
            if matches!(
                l.kind,
                LayerKind::EmbeddingTap | LayerKind::OutputSoftmax
            ) {
                report.push(&at, format!("{} must follow pooling", l.kind));
            }
            if l.size.is_none() {
                report.push(&at, "frame-level layer needs a size");
            }
            if l.kind == LayerKind::ResnetBlockStack && l.index != 1 {
                report.push(&at, "residual stack must consume the input features");
            }
        } else if l.kind != LayerKind::Pooling {
            if matches!(
                l.kind,
                LayerKind::Tdnn | LayerKind::Ftdnn | LayerKind::ResnetBlockStack
            ) {
                report.push(&at, format!("{} cannot follow pooling", l.kind));
            }
            if l.contexts.iter().any(|c| !c.is_current()) {
                report.push(&at, "segment-level layers take no temporal context");
            }
            if !l.skip_inputs.is_empty() {
                report.push(&at, "segment-level layers take no skip inputs");
            }
            if l.size.is_none() && l.kind != LayerKind::OutputSoftmax {
                report.push(&at, "segment-level layer needs a size");
            }
        }
        for &j in &l.skip_inputs {
            match b.layer(j) {
                None => report.push(&at, format!("skip input {j} does not exist")),
                Some(src) => {
                    if j >= l.index {
                        report.push(&at, format!("skip input {j} is not an earlier layer"));
                    } else if pool_at.is_some_and(|p| j >= p) || src.size.is_none() {
                        report.push(&at, format!("skip input {j} does not produce frame-level output"));
                    }
                    if !frame_level {
                        report.push(&at, "skip concatenation after pooling");
                    }
                }
            }
        }
    }

    if let Some(p) = pool_at {
        let prev = b.layers.iter().rfind(|l| l.index < p);
        let mut input = prev.and_then(|l| l.size).unwrap_or(0);
        if let Some(c) = &n.concat_pool {
            if c.branch != b.name {
                input += n.layer(c).and_then(|l| l.size).unwrap_or(0);
            }
        }
        let declared = b.layer(p).and_then(|l| l.size);
        if declared != Some(2 * input) {
            report.push(
                loc(&b.name, p),
                format!(
                    "pooling output {} does not equal 2 x frame input {}",
                    declared.map_or("unset".to_string(), |d| d.to_string()),
                    input
                ),
            );
        }
        match b.layers.last() {
            Some(last) if last.kind == LayerKind::OutputSoftmax => {
                if let (Some(size), Some(&classes)) = (last.size, n.classes.get(&b.name)) {
                    if size != classes {
                        report.push(loc(&b.name, last.index), "output size disagrees with class count");
                    }
                }
            }
            _ => report.push(&b.name, "embedding branch must end in output_softmax"),
        }
    }
    if b.layers.iter().filter(|l| l.kind == LayerKind::OutputSoftmax).count() > 1 {
        report.push(&b.name, "more than one output layer");
    }
}

/// Structural checks over a spec; an empty report means the graph is executable.
pub fn validate(n: &NetSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    for b in &n.branches {
        check_branch(n, b, &mut report);
    }

    match n.layer(&n.tap) {
        None => report.push("tap", format!("{}.{} does not exist", n.tap.branch, n.tap.layer)),
        Some(t) => {
            let b = n.branch(&n.tap.branch).unwrap();
            let after_pool = b.pooling_index().is_some_and(|p| t.index > p);
            if !after_pool || !matches!(t.kind, LayerKind::EmbeddingTap | LayerKind::Dense) {
                report.push("tap", "tap must be an affine segment-level layer after pooling");
            }
            let out = b.layers.iter().find(|l| l.kind == LayerKind::OutputSoftmax);
            if out.is_some_and(|o| o.index <= t.index) {
                report.push("tap", "tap must precede the output layer");
            }
        }
    }

    for s in &n.shared {
        let at = format!("share {} {} {}", s.branch_a, s.branch_b, s.layer);
        let (Some(a), Some(b)) = (n.branch(&s.branch_a), n.branch(&s.branch_b)) else {
            report.push(&at, "unknown branch");
            continue;
        };
        match (a.layer(s.layer), b.layer(s.layer)) {
            (Some(la), Some(lb)) => {
                if la != lb {
                    report.push(&at, "shared layers differ in specification");
                }
                if a.pooling_index().is_some_and(|p| s.layer >= p)
                    || b.pooling_index().is_some_and(|p| s.layer >= p)
                {
                    report.push(&at, "only frame-level layers can be shared");
                }
            }
            _ => report.push(&at, "shared layer missing in one branch"),
        }
        for below in 1..s.layer {
            let covered = n.shared.iter().any(|o| {
                o.layer == below
                    && ((o.branch_a == s.branch_a && o.branch_b == s.branch_b)
                        || (o.branch_a == s.branch_b && o.branch_b == s.branch_a))
            });
            if !covered {
                report.push(&at, format!("layer {below} below a shared layer is not shared"));
            }
        }
    }

    if let Some(c) = &n.concat_pool {
        let at = format!("concat_pool {} {}", c.branch, c.layer);
        match n.branch(&c.branch) {
            None => report.push(&at, "unknown branch"),
            Some(b) => match b.layer(c.layer) {
                None => report.push(&at, "layer does not exist"),
                Some(l) => {
                    if b.pooling_index().is_some() || l.size.is_none() || l.kind == LayerKind::OutputSoftmax {
                        report.push(&at, "concat source must produce frame-level output");
                    }
                    if c.branch == n.tap.branch {
                        report.push(&at, "concat source must be a different branch");
                    }
                }
            },
        }
    }
    for name in n.classes.keys() {
        if n.branch(name).is_none() {
            report.push(format!("classes {name}"), "unknown branch");
        }
    }
    report
}

/// Frame context (left, right) consumed by `branch` before pooling, along the
/// deepest path. For the pooling branch the concatenated source is included.
pub fn receptive_field(n: &NetSpec, branch: &str) -> Result<(usize, usize)> {
    let extents = frame_extents(n)?;
    let b = n
        .branch(branch)
        .ok_or_else(|| Error::InvalidInput(format!("unknown branch `{branch}`")))?;
    let last = b.frame_layers().last().map(|l| l.index);
    let mut ext = last.map_or((0, 0), |i| extents[&(b.name.clone(), i)]);
    if b.pooling_index().is_some() {
        if let Some(c) = &n.concat_pool {
            if let Some(&(lo, hi)) = extents.get(&(c.branch.clone(), c.layer)) {
                ext = (ext.0.min(lo), ext.1.max(hi));
            }
        }
    }
    Ok(((-ext.0).max(0) as usize, ext.1.max(0) as usize))
}

/// Cumulative (min, max) offset of every frame-level layer.
fn frame_extents(n: &NetSpec) -> Result<BTreeMap<(String, usize), (i64, i64)>> {
    let mut out: BTreeMap<(String, usize), (i64, i64)> = BTreeMap::new();
    for b in &n.branches {
        for l in b.frame_layers() {
            let mut inputs = Vec::new();
            if let Some(prev) = b.layers.iter().rfind(|p| p.index < l.index) {
                inputs.push(prev.index);
            }
            inputs.extend(l.skip_inputs.iter().copied());
            let base = inputs
                .iter()
                .map(|&i| {
                    out.get(&(b.name.clone(), i)).copied().ok_or_else(|| {
                        Error::InvalidInput(format!("{}.{}: input {} unresolved", b.name, l.index, i))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (lo, hi) = if base.is_empty() {
                (0, 0)
            } else {
                (
                    base.iter().map(|e| e.0).min().unwrap(),
                    base.iter().map(|e| e.1).max().unwrap(),
                )
            };
            let (clo, chi) = l.context_extent();
            out.insert((b.name.clone(), l.index), (lo + clo, hi + chi));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{builtin, parse_netspec, SharedLayer};

    #[test]
    fn etdnn_pooling_shape_violation() {
        let mut n = builtin("etdnn").unwrap();
        let b = &mut n.branches[0];
        b.layers[9].size = Some(1500);
        b.layers[10].size = Some(2 * 1499);
        let r = validate(&n);
        assert!(!r.is_ok());
        assert!(r.violations[0].message.contains("pooling"));
    }

    #[test]
    fn multitask_sharing_layer_two_is_rejected() {
        let mut n = builtin("multitask").unwrap();
        n.shared = vec![SharedLayer {
            branch_a: "xvector".into(),
            branch_b: "asr".into(),
            layer: 2,
        }];
        let r = validate(&n);
        assert!(r.violations.iter().any(|v| v.message.contains("differ")));
        assert!(r.violations.iter().any(|v| v.message.contains("not shared")));
    }

    #[test]
    fn tap_after_output_rejected() {
        let mut n = builtin("etdnn").unwrap();
        n.tap.layer = 14;
        assert!(!validate(&n).is_ok());
        n.tap.layer = 5;
        assert!(!validate(&n).is_ok());
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(&builtin("etdnn").unwrap(), "xvector").unwrap(), (11, 11));
        assert_eq!(receptive_field(&builtin("multitask").unwrap(), "asr").unwrap(), (7, 7));
        let dense = parse_netspec("branch x\n1 dense size=3\n2 dense size=3\ntap x 2\n").unwrap();
        assert_eq!(receptive_field(&dense, "x").unwrap(), (0, 0));
        // layers 1, 2 contribute 2 each; 4, 6, 7, 8, 9 contribute 3 each
        assert_eq!(receptive_field(&builtin("ftdnn").unwrap(), "xvector").unwrap(), (19, 19));
        // c-vector pools the bottleneck branch too: left 2+1+1+3+6, right 2+1+1+3
        assert_eq!(receptive_field(&builtin("cvector").unwrap(), "xvector").unwrap(), (13, 11));
    }
}
