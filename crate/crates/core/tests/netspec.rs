mod common;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xvec::embedder::Network;
use xvec::netspec::{builtin, parse_netspec, receptive_field, render_netspec, validate, BUILTIN_NAMES};

#[test]
fn builtins_match_reference_tables() {
    let m = common::golden_mismatches();
    assert!(m.is_empty(), "{}", m.join("\n"));
}

#[test]
fn context_cells_expand() {
    assert_eq!(common::offsets("t-2:t+2"), vec![-2, -1, 0, 1, 2]);
    assert_eq!(common::offsets("t-3, t"), vec![-3, 0]);
    assert_eq!(common::offsets("t"), vec![0]);
}

#[test]
fn builtins_round_trip_through_text() {
    for name in BUILTIN_NAMES {
        let n = builtin(name).unwrap();
        assert!(validate(&n).is_ok(), "{name}");
        assert_eq!(parse_netspec(&render_netspec(&n)).unwrap(), n, "{name}");
    }
}

/// Frames of `layer`'s output that change when input frame `t0` is perturbed.
fn influenced(name: &str, branch: &str, layer: usize, frames: usize, t0: usize) -> (usize, usize) {
    let spec = builtin(name).unwrap().scaled(1.0 / 16.0).with_classes("xvector", 3);
    let net = Network::init(spec, 6, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = DMatrix::from_fn(frames, 6, |_, _| rng.random_range(-1.0..1.0));
    let mut y = x.clone();
    for c in 0..6 {
        y[(t0, c)] += 0.5;
    }
    let a = net.forward(&x).unwrap();
    let b = net.forward(&y).unwrap();
    let oa = a.frame_output(&net.plan, branch, layer).unwrap();
    let ob = b.frame_output(&net.plan, branch, layer).unwrap();
    let changed: Vec<usize> = (0..frames).filter(|&t| oa.row(t) != ob.row(t)).collect();
    (t0 - changed[0], changed[changed.len() - 1] - t0)
}

#[test]
fn receptive_fields_match_impulse_probes() {
    let cases = [
        ("etdnn", "xvector", 10, (11, 11)),
        ("multitask", "asr", 7, (7, 7)),
        ("ftdnn", "xvector", 10, (19, 19)),
    ];
    for (name, branch, layer, expect) in cases {
        let spec = builtin(name).unwrap();
        assert_eq!(receptive_field(&spec, branch).unwrap(), expect, "{name}/{branch}");
        assert_eq!(influenced(name, branch, layer, 80, 40), expect, "{name}/{branch} probe");
    }
}
