use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::context::parse_context_at;
use super::{
    Activation, Branch, ContextSpec, LayerKind, LayerRef, LayerSpec, NetSpec, ResnetShape,
    SharedLayer,
};
use crate::error::{Error, Result};

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokens(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Token {
                    text: &line[s..i],
                    column: s + 1,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: s + 1,
        });
    }
    out
}

/// Re-joins `key=value` tokens whose value was split by whitespace, e.g.
/// `f1=t-3,t -1` or `f1=t-3, t`: a token without `=` continues the previous value.
fn merge_values(toks: Vec<Token<'_>>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for t in toks {
        match out.last_mut() {
            Some(last) if !t.text.contains('=') => {
                last.0.push(' ');
                last.0.push_str(t.text);
            }
            _ => out.push((t.text.to_string(), t.column)),
        }
    }
    out
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn parse_usize(text: &str, line: usize, column: usize, what: &str) -> Result<usize> {
    text.parse::<usize>()
        .map_err(|_| perr(line, column, format!("expected a count for {what}, found `{text}`")))
}

fn parse_list(text: &str, line: usize, column: usize, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| parse_usize(p.trim(), line, column, what))
        .collect()
}

pub fn parse_netspec(text: &str) -> Result<NetSpec> {
    let mut name: Option<String> = None;
    let mut branches: Vec<Branch> = Vec::new();
    let mut shared = Vec::new();
    let mut concat_pool = None;
    let mut tap: Option<LayerRef> = None;
    let mut classes = BTreeMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("");
        let toks = tokens(line);
        let Some(head) = toks.first() else { continue };
        let col = head.column;
        let arg = |i: usize| -> Result<&Token<'_>> {
            toks.get(i).ok_or_else(|| {
                perr(line_no, line.len() + 1, format!("`{}` expects more arguments", head.text))
            })
        };
        let expect_len = |n: usize| -> Result<()> {
            if toks.len() > n {
                Err(perr(line_no, toks[n].column, format!("unexpected `{}`", toks[n].text)))
            } else {
                Ok(())
            }
        };
        match head.text {
            "name" => {
                expect_len(2)?;
                name = Some(arg(1)?.text.to_string());
            }
            "branch" => {
                expect_len(2)?;
                let b = arg(1)?;
                if branches.iter().any(|x| x.name == b.text) {
                    return Err(perr(line_no, b.column, format!("duplicate branch `{}`", b.text)));
                }
                branches.push(Branch {
                    name: b.text.to_string(),
                    layers: Vec::new(),
                });
            }
            "share" => {
                expect_len(4)?;
                let l = arg(3)?;
                shared.push(SharedLayer {
                    branch_a: arg(1)?.text.to_string(),
                    branch_b: arg(2)?.text.to_string(),
                    layer: parse_usize(l.text, line_no, l.column, "shared layer")?,
                });
            }
            "concat_pool" | "tap" => {
                expect_len(3)?;
                let l = arg(2)?;
                let r = LayerRef {
                    branch: arg(1)?.text.to_string(),
                    layer: parse_usize(l.text, line_no, l.column, "layer")?,
                };
                let slot = if head.text == "tap" { &mut tap } else { &mut concat_pool };
                if slot.is_some() {
                    return Err(perr(line_no, col, format!("duplicate `{}` directive", head.text)));
                }
                *slot = Some(r);
            }
            "classes" => {
                expect_len(3)?;
                let n = arg(2)?;
                classes.insert(
                    arg(1)?.text.to_string(),
                    parse_usize(n.text, line_no, n.column, "class count")?,
                );
            }
            first if first.chars().all(|c| c.is_ascii_digit()) => {
                let index = parse_usize(first, line_no, col, "layer index")?;
                let branch = branches
                    .last_mut()
                    .ok_or_else(|| perr(line_no, col, "layer line before any `branch` header"))?;
                if index == 0 {
                    return Err(perr(line_no, col, "layer indices start at 1"));
                }
                if let Some(prev) = branch.layers.last() {
                    if index <= prev.index {
                        return Err(perr(
                            line_no,
                            col,
                            format!("layer {index} does not follow layer {}", prev.index),
                        ));
                    }
                }
                let layer = parse_layer(index, &toks, line, line_no)?;
                branch.layers.push(layer);
            }
            other => {
                return Err(perr(line_no, col, format!("unknown directive `{other}`")));
            }
        }
    }

    let tap = tap.ok_or_else(|| perr(text.lines().count().max(1), 1, "missing `tap` directive"))?;
    Ok(NetSpec {
        name: name.unwrap_or_else(|| "unnamed".to_string()),
        branches,
        shared,
        concat_pool,
        tap,
        classes,
    })
}

fn parse_layer(index: usize, toks: &[Token<'_>], line: &str, line_no: usize) -> Result<LayerSpec> {
    let kind_tok = toks
        .get(1)
        .ok_or_else(|| perr(line_no, line.len() + 1, "missing layer kind"))?;
    let kind: LayerKind = kind_tok
        .text
        .parse()
        .map_err(|m: String| perr(line_no, kind_tok.column, m))?;
    let mut layer = LayerSpec::new(index, kind);
    let mut factors: [Option<ContextSpec>; 3] = [None, None, None];
    let mut channels = None;
    let mut blocks = None;

    let rest: Vec<Token<'_>> = toks[2..]
        .iter()
        .map(|t| Token {
            text: t.text,
            column: t.column,
        })
        .collect();
    for (kv, column) in merge_values(rest) {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| perr(line_no, column, format!("expected key=value, found `{kv}`")))?;
        let vcol = column + key.len() + 1;
        match key {
            "f1" | "f2" | "f3" => {
                let slot = key[1..].parse::<usize>().unwrap() - 1;
                factors[slot] = Some(parse_context_at(value, line_no, vcol)?);
            }
            "size" => layer.size = Some(parse_usize(value, line_no, vcol, "size")?),
            "inner" => layer.inner_size = Some(parse_usize(value, line_no, vcol, "inner")?),
            "from" => {
                let from = parse_list(value, line_no, vcol, "from")?;
                if let Some(&bad) = from.iter().find(|&&j| j >= index || j == 0) {
                    return Err(perr(
                        line_no,
                        vcol,
                        format!("layer {index} cannot take input from layer {bad}"),
                    ));
                }
                let mut sorted = from.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != from.len() {
                    return Err(perr(line_no, vcol, "duplicate entry in `from`"));
                }
                layer.skip_inputs = sorted;
            }
            "act" => {
                layer.activation = match value {
                    "relu" => Activation::Relu,
                    "linear" => Activation::Linear,
                    other => {
                        return Err(perr(line_no, vcol, format!("unknown activation `{other}`")))
                    }
                }
            }
            "channels" => channels = Some(parse_list(value, line_no, vcol, "channels")?),
            "blocks" => blocks = Some(parse_list(value, line_no, vcol, "blocks")?),
            other => return Err(perr(line_no, column, format!("unknown key `{other}`"))),
        }
    }

    match kind {
        LayerKind::Tdnn | LayerKind::Dense => {
            if factors[1].is_some() || factors[2].is_some() {
                return Err(perr(line_no, kind_tok.column, format!("{kind} takes a single context")));
            }
            layer.contexts = vec![factors[0].take().unwrap_or_else(ContextSpec::current)];
        }
        LayerKind::Ftdnn => {
            let n = factors.iter().take_while(|f| f.is_some()).count();
            if n < 2 || factors[n..].iter().any(|f| f.is_some()) {
                return Err(perr(
                    line_no,
                    kind_tok.column,
                    "ftdnn needs contexts f1 and f2 (and optionally f3)",
                ));
            }
            layer.contexts = factors.into_iter().flatten().collect();
        }
        _ => {
            if factors.iter().any(|f| f.is_some()) {
                return Err(perr(line_no, kind_tok.column, format!("{kind} takes no context")));
            }
        }
    }
    if kind == LayerKind::ResnetBlockStack {
        let shape = match (channels, blocks) {
            (None, None) => ResnetShape::resnet34(),
            (Some(c), Some(b)) if c.len() == b.len() && !c.is_empty() => ResnetShape {
                channels: c,
                blocks: b,
            },
            _ => {
                return Err(perr(
                    line_no,
                    kind_tok.column,
                    "channels and blocks must be given together with equal lengths",
                ))
            }
        };
        if layer.size.is_none() {
            layer.size = shape.channels.last().copied();
        }
        layer.resnet = Some(shape);
    } else if channels.is_some() || blocks.is_some() {
        return Err(perr(line_no, kind_tok.column, "channels/blocks only apply to resnet_block_stack"));
    }
    Ok(layer)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn render_netspec(n: &NetSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "name {}", n.name);
    for b in &n.branches {
        let _ = writeln!(s, "branch {}", b.name);
        for l in &b.layers {
            let _ = write!(s, "{} {}", l.index, l.kind);
            for (i, c) in l.contexts.iter().enumerate() {
                let _ = write!(s, " f{}={}", i + 1, c);
            }
            if let Some(size) = l.size {
                let _ = write!(s, " size={size}");
            }
            if let Some(inner) = l.inner_size {
                let _ = write!(s, " inner={inner}");
            }
            if !l.skip_inputs.is_empty() {
                let _ = write!(s, " from={}", join(&l.skip_inputs));
            }
            if l.activation == Activation::Linear {
                s.push_str(" act=linear");
            }
            if let Some(shape) = &l.resnet {
                let _ = write!(
                    s,
                    " channels={} blocks={}",
                    join(&shape.channels),
                    join(&shape.blocks)
                );
            }
            s.push('\n');
        }
    }
    for sh in &n.shared {
        let _ = writeln!(s, "share {} {} {}", sh.branch_a, sh.branch_b, sh.layer);
    }
    if let Some(c) = &n.concat_pool {
        let _ = writeln!(s, "concat_pool {} {}", c.branch, c.layer);
    }
    let _ = writeln!(s, "tap {} {}", n.tap.branch, n.tap.layer);
    for (b, c) in &n.classes {
        let _ = writeln!(s, "classes {b} {c}");
    }
    s
}
