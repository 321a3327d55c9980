//! Property-based tests: randomized inputs against independent oracles and
//! algebraic invariants (round trips, monotonicity, idempotence).

use diffprune::codec::{
    decode_checkpoint, decode_diff, encode_checkpoint, encode_diff, Checkpoint,
};
use diffprune::config::RunConfig;
use diffprune::error::Error;
use diffprune::gates::{expected_l0, sample_gate, sample_gate_graph, GateParams, Stretch};
use diffprune::pipeline::project_l0;
use diffprune::reparam::{compose, finalize, DiffVector, GatedDiff};
use diffprune::space::{seg, FlatParamSpace, Segment};
use diffprune::tensor::Graph;
use proptest::prelude::*;
use std::sync::Arc;

// ─── strategies ───

/// Nonzero finite f32 suitable for diff values.
fn value() -> impl Strategy<Value = f32> {
    prop_oneof![
        (0.001f32..100.0),
        (-100.0f32..-0.001),
        Just(1.0f32),
        Just(-0.5f32),
    ]
}

/// A parameter space of 1–4 segments with small lengths, mixed shapes,
/// layers, and head flags. The first segment is always non-head so that
/// projection budgets are never degenerate.
fn space_strategy() -> impl Strategy<Value = Arc<FlatParamSpace>> {
    proptest::collection::vec((1usize..=6, 0u16..3, any::<bool>()), 1..=4).prop_map(|specs| {
        let mut segments = Vec::new();
        let mut offset = 0usize;
        for (i, (len, layer, head)) in specs.iter().enumerate() {
            let head = *head && i != 0;
            // Alternate rank-1 and rank-2 shapes (rank-2 only when the
            // length factors cleanly).
            let shape: Vec<usize> = if len % 2 == 0 && i % 2 == 1 {
                vec![2, len / 2]
            } else {
                vec![*len]
            };
            let s: Segment = seg(&format!("seg{i}"), offset, &shape, *layer, head);
            debug_assert_eq!(s.len, *len);
            segments.push(s);
            offset += len;
        }
        Arc::new(FlatParamSpace::new(segments).unwrap())
    })
}

/// A space plus a sparse diff over it: each flat position carries a value
/// with probability ~0.5.
fn diff_strategy() -> impl Strategy<Value = DiffVector> {
    space_strategy().prop_flat_map(|space| {
        let d = space.dim();
        proptest::collection::vec(proptest::option::weighted(0.5, value()), d).prop_map(
            move |slots| {
                let entries: Vec<(u32, f32)> = slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| v.map(|val| (i as u32, val)))
                    .collect();
                DiffVector::new(space.clone(), entries).unwrap()
            },
        )
    })
}

fn noise() -> impl Strategy<Value = f32> {
    // Strictly inside (0, 1) with margin, like the training-time draws.
    1e-5f32..0.99999
}

// ─── gates ───

proptest! {
    /// The host gate chain and the graph gate chain are the same f32 ops in
    /// the same order, so on identical noise they agree bit for bit.
    #[test]
    fn gate_host_and_graph_agree_bitwise(
        alpha in proptest::collection::vec(-6.0f32..6.0, 1..16),
        seedling in any::<u64>(),
    ) {
        let n = alpha.len();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seedling);
        let u = diffprune::gates::draw_noise(&mut rng, n);
        let stretch = Stretch::default();
        let host = sample_gate(&GateParams { alpha: alpha.clone(), stretch }, &u).unwrap();
        let mut g = Graph::new();
        let leaf = g.leaf(alpha, &[n], true).unwrap();
        let z = sample_gate_graph(&mut g, leaf, &u, stretch).unwrap();
        let graph_z = g.data(z);
        for (hz, gz) in host.z.iter().zip(graph_z) {
            prop_assert_eq!(hz.to_bits(), gz.to_bits());
        }
    }

    /// For fixed noise, the sampled gate is nondecreasing in the location
    /// parameter, and always inside [0, 1].
    #[test]
    fn gate_monotone_in_alpha(
        a in -8.0f32..8.0,
        bump in 0.01f32..8.0,
        u in noise(),
    ) {
        let stretch = Stretch::default();
        let lo = sample_gate(&GateParams { alpha: vec![a], stretch }, &[u]).unwrap();
        let hi = sample_gate(&GateParams { alpha: vec![a + bump], stretch }, &[u]).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo.z[0]));
        prop_assert!((0.0..=1.0).contains(&hi.z[0]));
        prop_assert!(hi.z[0] >= lo.z[0]);
    }

    /// Each gate's open probability lies strictly inside (0, 1) and is
    /// increasing in alpha; the summed expected L0 is therefore bounded by
    /// the coordinate count.
    #[test]
    fn expected_l0_bounded_and_monotone(
        alpha in proptest::collection::vec(-10.0f32..10.0, 1..32),
        bump in 0.5f32..4.0,
    ) {
        let stretch = Stretch::default();
        let p = expected_l0(&GateParams { alpha: alpha.clone(), stretch });
        let total: f64 = p.iter().sum();
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(total > 0.0 && total < alpha.len() as f64);

        let bumped: Vec<f32> = alpha.iter().map(|&a| a + bump).collect();
        let q = expected_l0(&GateParams { alpha: bumped, stretch });
        for (pi, qi) in p.iter().zip(&q) {
            prop_assert!(qi > pi);
        }
    }
}

// ─── finalization ───

proptest! {
    /// Finalizing twice with the same seed gives bitwise-identical diffs;
    /// head coordinates pass through ungated; every stored value is nonzero
    /// and finite by construction.
    #[test]
    fn finalize_is_deterministic_and_respects_heads(
        space in space_strategy(),
        seed in any::<u64>(),
        fills in proptest::collection::vec(-2.0f32..2.0, 64),
        alphas in proptest::collection::vec(-6.0f32..6.0, 64),
        structured in any::<bool>(),
    ) {
        let d = space.dim();
        let mut diff = GatedDiff::new(space.clone(), Stretch::default(), 5.0, 0.0, structured);
        for i in 0..d {
            diff.w[i] = fills[i % fills.len()];
            diff.gate.alpha[i] = alphas[i % alphas.len()];
        }
        if let Some(p) = &mut diff.structure {
            for (j, a) in p.alpha.iter_mut().enumerate() {
                *a = alphas[(7 * j + 3) % alphas.len()];
            }
        }
        let first = finalize(&diff, seed).unwrap();
        let second = finalize(&diff, seed).unwrap();
        prop_assert_eq!(first.entries().len(), second.entries().len());
        for (a, b) in first.entries().iter().zip(second.entries()) {
            prop_assert_eq!(a.0, b.0);
            prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
        for s in space.segments().iter().filter(|s| s.head) {
            for i in s.range() {
                // Heads carry w through untouched (absent iff w is zero).
                prop_assert_eq!(first.get(i as u32), (diff.w[i] != 0.0).then_some(diff.w[i]));
            }
        }
    }
}

// ─── projection ───

/// Brute-force top-k selection oracle: every non-head entry ranked by
/// descending magnitude, ties broken by ascending position.
fn brute_force_kept(dv: &DiffVector, k: usize) -> Vec<u32> {
    let space = dv.space();
    let mut nonhead: Vec<(u32, f32)> = dv
        .entries()
        .iter()
        .copied()
        .filter(|&(pos, _)| !space.is_head(pos as usize))
        .collect();
    nonhead.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    let mut kept: Vec<u32> = nonhead.iter().take(k).map(|&(p, _)| p).collect();
    kept.sort_unstable();
    kept
}

proptest! {
    /// Projection keeps exactly the brute-force top-k non-head set (never
    /// more than the budget), preserves every head entry bit for bit, and is
    /// idempotent at the same rate.
    #[test]
    fn projection_matches_brute_force(dv in diff_strategy(), t in 0.01f64..1.0) {
        let space = dv.space().clone();
        let k = (t * space.nonhead_dim() as f64).ceil() as usize;
        let projected = project_l0(&dv, t).unwrap();

        let expected = brute_force_kept(&dv, k);
        let actual: Vec<u32> = projected
            .entries()
            .iter()
            .filter(|&&(pos, _)| !space.is_head(pos as usize))
            .map(|&(p, _)| p)
            .collect();
        prop_assert_eq!(&actual, &expected);
        prop_assert!(actual.len() <= k);

        // Kept values and head entries are carried over bitwise.
        for &(pos, val) in projected.entries() {
            prop_assert_eq!(dv.get(pos).unwrap().to_bits(), val.to_bits());
        }
        for &(pos, val) in dv.entries() {
            if space.is_head(pos as usize) {
                prop_assert_eq!(projected.get(pos).unwrap().to_bits(), val.to_bits());
            }
        }

        let again = project_l0(&projected, t).unwrap();
        prop_assert_eq!(again.entries(), projected.entries());
    }
}

// ─── codec ───

fn meta_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(String::new()),
        "[a-z_]{1,8}=[0-9.]{1,6}(\n[a-z_]{1,8}=[0-9.]{1,6}){0,4}",
        Just("π≈3.14159 — non-ASCII survives".to_string()),
    ]
}

proptest! {
    /// Diff files decode back to exactly what was encoded: same segment
    /// table (names, shapes, offsets, layers, head flags), same entries bit
    /// for bit, same metadata string.
    #[test]
    fn diff_files_round_trip(dv in diff_strategy(), meta in meta_strategy()) {
        let bytes = encode_diff(&dv, &meta).unwrap();
        let file = decode_diff(&bytes).unwrap();
        prop_assert_eq!(file.diff.space().segments(), dv.space().segments());
        prop_assert_eq!(file.diff.entries().len(), dv.entries().len());
        for (a, b) in file.diff.entries().iter().zip(dv.entries()) {
            prop_assert_eq!(a.0, b.0);
            prop_assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
        prop_assert_eq!(&file.meta, &meta);
    }

    /// Corrupting any single byte of a diff file is caught by the checksum,
    /// which is verified before any parsing.
    #[test]
    fn any_single_byte_corruption_is_rejected(
        dv in diff_strategy(),
        meta in meta_strategy(),
        which in any::<proptest::sample::Index>(),
    ) {
        let mut bytes = encode_diff(&dv, &meta).unwrap();
        let i = which.index(bytes.len());
        bytes[i] ^= 0xFF;
        match decode_diff(&bytes) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => prop_assert!(false, "expected checksum failure, got {other:?}"),
        }
    }

    /// Checkpoints round-trip bitwise, and applying an encoded-then-decoded
    /// patch equals composing the raw diff on the host.
    #[test]
    fn checkpoints_and_patching_round_trip(
        dv in diff_strategy(),
        raw in proptest::collection::vec(-3.0f32..3.0, 64),
        meta in meta_strategy(),
    ) {
        let space = dv.space().clone();
        let theta: Vec<f32> = (0..space.dim()).map(|i| raw[i % raw.len()]).collect();
        let ckpt = Checkpoint { space: space.clone(), theta: theta.clone(), meta };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.space.segments(), space.segments());
        prop_assert_eq!(back.theta.len(), theta.len());
        for (a, b) in back.theta.iter().zip(&theta) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(&back.meta, &ckpt.meta);

        let diff_bytes = encode_diff(&dv, "").unwrap();
        let patch = decode_diff(&diff_bytes).unwrap();
        let patched = diffprune::codec::apply_patch(&ckpt, &patch).unwrap();
        let composed = compose(&theta, &dv).unwrap();
        for (a, b) in patched.theta.iter().zip(&composed) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

// ─── config ───

proptest! {
    /// `resolved()` output parses back to an identical resolved config for
    /// arbitrary valid settings (text round trip, including floats).
    #[test]
    fn config_resolved_text_round_trips(
        layers in 1usize..3,
        heads_pow in 0u32..2,
        dk in 1usize..5,
        classes in 2usize..5,
        anchors in 1usize..3,
        extra_vocab in 0usize..5,
        seq_len in 1usize..9,
        lambda in 0.0f64..8.0,
        lr in 0.001f64..2.0,
        sparsity in 0.001f64..1.0,
        anchor_prob in 0.05f64..0.95,
        structured in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut cfg = RunConfig::default();
        let heads = 1usize << heads_pow;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.d_model = heads * dk;
        cfg.classes = classes;
        cfg.anchors_per_class = anchors;
        cfg.vocab = classes * anchors + extra_vocab;
        cfg.seq_len = seq_len;
        cfg.lambda = lambda;
        cfg.learning_rate = lr;
        cfg.sparsity = sparsity;
        cfg.anchor_prob = anchor_prob;
        cfg.structured = structured;
        cfg.seed = seed;
        prop_assume!(cfg.validate().is_ok());

        let text = cfg.resolved();
        let parsed = diffprune::config::parse(&text).unwrap();
        prop_assert_eq!(parsed.resolved(), text);
    }
}

// ─── space ───

proptest! {
    /// Segment lookup by flat position always lands inside that segment's
    /// range, for every position in the space.
    #[test]
    fn segment_lookup_covers_every_position(space in space_strategy()) {
        for pos in 0..space.dim() {
            let s = space.segment_of(pos);
            prop_assert!(s.range().contains(&pos));
            prop_assert_eq!(space.is_head(pos), s.head);
        }
    }
}
