//! The gated diff reparameterization `delta = z * w`.
//!
//! Task parameters are expressed as `theta + delta` with `theta` frozen.
//! During training `delta` is not a free vector: each non-head coordinate is
//! the product of a learned weight `w_i` and a sampled Hard-Concrete gate
//! `z_i` (see [`crate::gates`]), so the expected-L0 penalty has a closed form
//! in the gate locations `alpha`. Structured mode multiplies a second,
//! group-level gate `z^j` into every coordinate of group `j`, letting whole
//! segments switch off as units.
//!
//! Head coordinates are special throughout: `delta_i = w_i` directly, with no
//! gate and no penalty. Task output layers always ship with the diff.
//!
//! After training, [`finalize`] draws one gate realization and materializes a
//! concrete sparse [`DiffVector`]; saturated-low gates produce exact zeros,
//! interior gate values fold into the stored weight.

use crate::error::{Error, Result};
use crate::gates::{self, GateParams, Stretch};
use crate::space::{FlatParamSpace, GroupPartition};
use crate::tensor::{Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

// ─── training-time state ───

/// Trainable diff state: weights and gate locations over one flat space.
#[derive(Clone, Debug)]
pub struct GatedDiff {
    pub space: Arc<FlatParamSpace>,
    /// Diff weights, length `space.dim()`.
    pub w: Vec<f32>,
    /// Per-parameter gates, `alpha` length `space.dim()`. Entries at head
    /// positions are carried for alignment but never sampled, penalized, or
    /// updated.
    pub gate: GateParams,
    /// Group-level gates for structured mode.
    pub structure: Option<GroupPartition>,
}

impl GatedDiff {
    pub fn new(
        space: Arc<FlatParamSpace>,
        stretch: Stretch,
        alpha_init: f32,
        w_init: f32,
        structured: bool,
    ) -> Self {
        let structure = structured.then(|| GroupPartition::per_segment(&space, alpha_init));
        GatedDiff {
            gate: GateParams {
                alpha: vec![alpha_init; space.dim()],
                stretch,
            },
            w: vec![w_init; space.dim()],
            structure,
            space,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.space.dim();
        if self.w.len() != d {
            return Err(Error::LengthMismatch {
                what: "diff weights",
                expected: d,
                actual: self.w.len(),
            });
        }
        if self.gate.alpha.len() != d {
            return Err(Error::LengthMismatch {
                what: "gate locations",
                expected: d,
                actual: self.gate.alpha.len(),
            });
        }
        Ok(())
    }
}

/// One step's worth of gate noise: per-parameter draws for every non-head
/// coordinate (in flat position order), then one draw per group. The same
/// layout is used at train time and at finalization.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub per_param: Vec<f32>,
    pub per_group: Vec<f32>,
}

/// Draws a full noise vector for `diff` from `rng`.
pub fn draw_noise(diff: &GatedDiff, rng: &mut ChaCha8Rng) -> NoiseDraw {
    let n_groups = diff.structure.as_ref().map_or(0, |p| p.n_groups());
    NoiseDraw {
        per_param: gates::draw_noise(rng, diff.space.nonhead_dim()),
        per_group: gates::draw_noise(rng, n_groups),
    }
}

/// Handles to the trainable leaves of one step graph, in the order the
/// optimizer visits them.
pub struct TrainLeaves {
    /// `(segment index, w leaf)` for every segment.
    pub w: Vec<(usize, Var)>,
    /// `(segment index, alpha leaf)` for every non-head segment.
    pub alpha: Vec<(usize, Var)>,
    /// `(group index, alpha leaf)` for every group in structured mode.
    pub group_alpha: Vec<(usize, Var)>,
}

/// The differentiable diff for one training step: one `[len]` vector per
/// segment, index-aligned with `space.segments()`.
pub struct TrainDelta {
    pub per_segment: Vec<Var>,
    pub leaves: TrainLeaves,
}

impl TrainDelta {
    /// Dense flat view of the step's delta values (segments tile the space,
    /// so concatenation in segment order is the flat vector).
    pub fn flatten(&self, g: &Graph) -> Vec<f32> {
        let mut out = Vec::new();
        for &v in &self.per_segment {
            out.extend_from_slice(g.data(v));
        }
        out
    }
}

/// Tiles a `[1]` scalar node across `n` rows: `ones[n,1] @ s[1,1]`, reshaped
/// to `[n]`. Gradient flows back as the sum over the tile, which is exactly
/// the group-gate accumulation the structured penalty needs.
fn tile_scalar(g: &mut Graph, s: Var, n: usize) -> Result<Var> {
    let ones = g.constant(vec![1.0; n], &[n, 1])?;
    let col = g.reshape(s, &[1, 1])?;
    let tiled = g.matmul(ones, col)?;
    g.reshape(tiled, &[n])
}

/// Builds the differentiable delta for one step: gates sampled from `u`,
/// multiplied into the weights, group gates applied in structured mode, head
/// segments passed through ungated. Returns per-segment delta vectors plus
/// the leaf handles the optimizer updates.
pub fn train_delta(g: &mut Graph, diff: &GatedDiff, u: &NoiseDraw) -> Result<TrainDelta> {
    diff.validate()?;
    if u.per_param.len() != diff.space.nonhead_dim() {
        return Err(Error::LengthMismatch {
            what: "per-parameter noise",
            expected: diff.space.nonhead_dim(),
            actual: u.per_param.len(),
        });
    }
    let seg_groups = match &diff.structure {
        Some(p) => {
            if u.per_group.len() != p.n_groups() {
                return Err(Error::LengthMismatch {
                    what: "per-group noise",
                    expected: p.n_groups(),
                    actual: u.per_group.len(),
                });
            }
            Some(p.segment_groups(&diff.space)?)
        }
        None => None,
    };

    // Group gates are built once each and shared by all segments of the group.
    let mut group_z: Vec<Option<Var>> = Vec::new();
    let mut group_alpha_leaves: Vec<(usize, Var)> = Vec::new();
    if let Some(p) = &diff.structure {
        group_z = vec![None; p.n_groups()];
        for (j, &aj) in p.alpha.iter().enumerate() {
            let leaf = g.leaf(vec![aj], &[1], true)?;
            let z = gates::sample_gate_graph(g, leaf, &u.per_group[j..=j], diff.gate.stretch)?;
            group_alpha_leaves.push((j, leaf));
            group_z[j] = Some(z);
        }
    }

    let mut per_segment = Vec::with_capacity(diff.space.segments().len());
    let mut w_leaves = Vec::new();
    let mut alpha_leaves = Vec::new();
    let mut cursor = 0usize;
    for (si, s) in diff.space.segments().iter().enumerate() {
        let w_leaf = g.leaf(diff.w[s.range()].to_vec(), &[s.len], true)?;
        w_leaves.push((si, w_leaf));
        if s.head {
            per_segment.push(w_leaf);
            continue;
        }
        let alpha_leaf = g.leaf(diff.gate.alpha[s.range()].to_vec(), &[s.len], true)?;
        alpha_leaves.push((si, alpha_leaf));
        let u_seg = &u.per_param[cursor..cursor + s.len];
        cursor += s.len;
        let z = gates::sample_gate_graph(g, alpha_leaf, u_seg, diff.gate.stretch)?;
        let mut d = g.mul(z, w_leaf)?;
        if let Some(seg_groups) = &seg_groups {
            let j = seg_groups[si].ok_or(Error::UngroupedIndex { index: s.offset })?;
            let zj = group_z[j].expect("group gate built above");
            let tiled = tile_scalar(g, zj, s.len)?;
            d = g.mul(d, tiled)?;
        }
        per_segment.push(d);
    }
    Ok(TrainDelta {
        per_segment,
        leaves: TrainLeaves {
            w: w_leaves,
            alpha: alpha_leaves,
            group_alpha: group_alpha_leaves,
        },
    })
}

/// Expected L0 of the gated diff as a differentiable scalar, built over the
/// same alpha leaves as the step's gate chains so one backward pass serves
/// both the risk and the penalty.
pub fn expected_l0_graph(g: &mut Graph, diff: &GatedDiff, leaves: &TrainLeaves) -> Result<Var> {
    let c = diff.gate.stretch.log_ratio() as f32;
    let mut group_p: Vec<Option<Var>> = vec![None; leaves.group_alpha.len()];
    for &(j, aj) in &leaves.group_alpha {
        let shifted = g.affine_stretch(aj, 1.0, -c)?;
        group_p[j] = Some(g.sigmoid(shifted)?);
    }
    let seg_groups = match &diff.structure {
        Some(p) => Some(p.segment_groups(&diff.space)?),
        None => None,
    };
    let mut total: Option<Var> = None;
    for &(si, alpha) in &leaves.alpha {
        let s = &diff.space.segments()[si];
        let shifted = g.affine_stretch(alpha, 1.0, -c)?;
        let mut p = g.sigmoid(shifted)?;
        if let Some(seg_groups) = &seg_groups {
            let j = seg_groups[si].ok_or(Error::UngroupedIndex { index: s.offset })?;
            let pj = group_p[j].expect("group probability built above");
            let tiled = tile_scalar(g, pj, s.len)?;
            p = g.mul(p, tiled)?;
        }
        let term = g.reduce_sum(p)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.scalar_const(0.0),
    }
}

/// Closed-form expected L0 in f64, for penalties reported in metrics and for
/// analysis. Head coordinates contribute nothing. Structured mode multiplies
/// the group probability into each member coordinate:
/// `sum_j sum_{i in g(j)} sigmoid(alpha_i - c) * sigmoid(alpha_j - c)`.
pub fn expected_l0_total(diff: &GatedDiff) -> f64 {
    let c = diff.gate.stretch.log_ratio();
    let p = |a: f32| gates::sigmoid64(a as f64 - c);
    match &diff.structure {
        None => diff
            .space
            .segments()
            .iter()
            .filter(|s| !s.head)
            .flat_map(|s| diff.gate.alpha[s.range()].iter())
            .map(|&a| p(a))
            .sum(),
        Some(partition) => partition
            .groups()
            .iter()
            .zip(&partition.alpha)
            .map(|(members, &aj)| {
                p(aj) * members.iter().map(|&i| p(diff.gate.alpha[i])).sum::<f64>()
            })
            .sum(),
    }
}

// ─── concrete diffs ───

/// A materialized sparse diff: strictly ascending positions with nonzero,
/// finite values, tied to the space it indexes into.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffVector {
    space: Arc<FlatParamSpace>,
    entries: Vec<(u32, f32)>,
}

impl DiffVector {
    pub fn new(space: Arc<FlatParamSpace>, entries: Vec<(u32, f32)>) -> Result<Self> {
        if space.dim() as u64 > u32::MAX as u64 {
            return Err(Error::DimensionTooLarge {
                dim: space.dim() as u64,
            });
        }
        for (i, &(pos, val)) in entries.iter().enumerate() {
            if pos as usize >= space.dim() {
                return Err(Error::PositionOutOfRange {
                    position: pos as u64,
                    dim: space.dim() as u64,
                });
            }
            if i > 0 && entries[i - 1].0 >= pos {
                return Err(Error::UnsortedPositions { index: i });
            }
            if val == 0.0 {
                return Err(Error::StoredZero { index: i });
            }
            if !val.is_finite() {
                return Err(Error::StoredNonFinite { index: i });
            }
        }
        Ok(DiffVector { space, entries })
    }

    pub fn empty(space: Arc<FlatParamSpace>) -> Self {
        DiffVector {
            space,
            entries: Vec::new(),
        }
    }

    /// Builds from a dense vector, dropping exact zeros.
    pub fn from_dense(space: Arc<FlatParamSpace>, dense: &[f32]) -> Result<Self> {
        if dense.len() != space.dim() {
            return Err(Error::LengthMismatch {
                what: "dense diff",
                expected: space.dim(),
                actual: dense.len(),
            });
        }
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32, v))
            .collect();
        Self::new(space, entries)
    }

    pub fn space(&self) -> &Arc<FlatParamSpace> {
        &self.space
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    pub fn nonhead_support_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|&&(pos, _)| !self.space.is_head(pos as usize))
            .count()
    }

    pub fn get(&self, pos: u32) -> Option<f32> {
        self.entries
            .binary_search_by_key(&pos, |&(p, _)| p)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.space.dim()];
        for &(pos, val) in &self.entries {
            out[pos as usize] = val;
        }
        out
    }

    /// Support positions as a sorted vector.
    pub fn positions(&self) -> Vec<u32> {
        self.entries.iter().map(|&(p, _)| p).collect()
    }
}

/// Task parameters `theta + delta`. Positions absent from the diff keep
/// `theta` bit for bit: no arithmetic touches them.
pub fn compose(theta: &[f32], delta: &DiffVector) -> Result<Vec<f32>> {
    if theta.len() != delta.space().dim() {
        return Err(Error::LengthMismatch {
            what: "base parameters",
            expected: delta.space().dim(),
            actual: theta.len(),
        });
    }
    let mut out = theta.to_vec();
    for &(pos, val) in delta.entries() {
        out[pos as usize] += val;
    }
    Ok(out)
}

/// Draws one gate realization from `seed` and materializes the trained diff
/// as a concrete sparse vector: `delta_i = z_i * w_i` off heads (times the
/// group gate in structured mode), `delta_i = w_i` on heads. Exact zeros are
/// dropped.
pub fn finalize(diff: &GatedDiff, seed: u64) -> Result<DiffVector> {
    diff.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = draw_noise(diff, &mut rng);

    // Non-head gate chain over the concatenated alpha slices, mirroring the
    // training layout.
    let alpha_nonhead: Vec<f32> = diff
        .space
        .segments()
        .iter()
        .filter(|s| !s.head)
        .flat_map(|s| diff.gate.alpha[s.range()].iter().copied())
        .collect();
    let sample = gates::sample_gate(
        &GateParams {
            alpha: alpha_nonhead,
            stretch: diff.gate.stretch,
        },
        &u.per_param,
    )?;
    let group_z = match &diff.structure {
        Some(p) => gates::sample_gate(
            &GateParams {
                alpha: p.alpha.clone(),
                stretch: diff.gate.stretch,
            },
            &u.per_group,
        )?
        .z,
        None => Vec::new(),
    };

    let mut entries = Vec::new();
    let mut cursor = 0usize;
    for s in diff.space.segments() {
        if s.head {
            for i in s.range() {
                if diff.w[i] != 0.0 {
                    entries.push((i as u32, diff.w[i]));
                }
            }
            continue;
        }
        for i in s.range() {
            let mut z = sample.z[cursor];
            cursor += 1;
            if let Some(p) = &diff.structure {
                let j = p.group_of(i).ok_or(Error::UngroupedIndex { index: i })?;
                z *= group_z[j];
            }
            let v = z * diff.w[i];
            if v != 0.0 {
                entries.push((i as u32, v));
            }
        }
    }
    DiffVector::new(Arc::clone(&diff.space), entries)
}

// ─── tests ───

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{seg, FlatParamSpace};
    use approx::assert_abs_diff_eq;

    fn toy_space() -> Arc<FlatParamSpace> {
        Arc::new(
            FlatParamSpace::new(vec![
                seg("a", 0, &[4], 0, false),
                seg("b", 4, &[2], 1, false),
                seg("head", 6, &[3], 2, true),
            ])
            .unwrap(),
        )
    }

    fn noise(diff: &GatedDiff, u: f32) -> NoiseDraw {
        NoiseDraw {
            per_param: vec![u; diff.space.nonhead_dim()],
            per_group: vec![u; diff.structure.as_ref().map_or(0, |p| p.n_groups())],
        }
    }

    #[test]
    fn compose_adds_sparse_entries_and_leaves_the_rest_untouched() {
        let space = toy_space();
        let theta = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let delta = DiffVector::new(Arc::clone(&space), vec![(1, 0.5)]).unwrap();
        let composed = compose(&theta, &delta).unwrap();
        assert_eq!(composed, vec![1.0, 2.5, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        // Untouched coordinates are the same bits, not just close.
        for i in [0usize, 2, 3, 4, 5, 6, 7, 8] {
            assert_eq!(composed[i].to_bits(), theta[i].to_bits());
        }
    }

    #[test]
    fn diff_vector_rejects_malformed_entries() {
        let space = toy_space();
        assert!(matches!(
            DiffVector::new(Arc::clone(&space), vec![(3, 1.0), (3, 2.0)]),
            Err(Error::UnsortedPositions { index: 1 })
        ));
        assert!(matches!(
            DiffVector::new(Arc::clone(&space), vec![(2, 0.0)]),
            Err(Error::StoredZero { index: 0 })
        ));
        assert!(matches!(
            DiffVector::new(Arc::clone(&space), vec![(9, 1.0)]),
            Err(Error::PositionOutOfRange { position: 9, .. })
        ));
        assert!(matches!(
            DiffVector::new(space, vec![(0, f32::NAN)]),
            Err(Error::StoredNonFinite { index: 0 })
        ));
    }

    #[test]
    fn open_gates_make_delta_equal_w_off_heads() {
        let space = toy_space();
        let mut diff = GatedDiff::new(Arc::clone(&space), Stretch::default(), 40.0, 0.0, false);
        for (i, w) in diff.w.iter_mut().enumerate() {
            *w = 0.1 * (i as f32 + 1.0);
        }
        let mut g = Graph::new();
        let td = train_delta(&mut g, &diff, &noise(&diff, 0.5)).unwrap();
        let flat = td.flatten(&g);
        for (i, f) in flat.iter().enumerate().take(space.nonhead_dim()) {
            assert_eq!(f.to_bits(), diff.w[i].to_bits(), "coord {i}");
        }
        // Heads pass through regardless of gates.
        for (i, f) in flat.iter().enumerate().skip(space.nonhead_dim()) {
            assert_eq!(f.to_bits(), diff.w[i].to_bits(), "head coord {i}");
        }
    }

    #[test]
    fn closed_group_gate_zeroes_its_whole_group() {
        let space = toy_space();
        let mut diff = GatedDiff::new(Arc::clone(&space), Stretch::default(), 40.0, 1.0, true);
        // Group 0 is segment `a`; slam its group gate shut.
        diff.structure.as_mut().unwrap().alpha[0] = -40.0;
        let mut g = Graph::new();
        let td = train_delta(&mut g, &diff, &noise(&diff, 0.5)).unwrap();
        let flat = td.flatten(&g);
        assert_eq!(&flat[0..4], &[0.0; 4]);
        assert!(flat[4..6].iter().all(|&v| v == 1.0), "group 1 stays open");
    }

    #[test]
    fn interior_gates_multiply_into_delta() {
        // alpha = 0 and u = 2/3 give z = 0.5 for both the parameter gate and
        // the group gate, so delta = 0.5 * 0.5 * 0.8 = 0.2.
        let space = Arc::new(
            FlatParamSpace::new(vec![
                seg("only", 0, &[1], 0, false),
                seg("head", 1, &[1], 1, true),
            ])
            .unwrap(),
        );
        let mut diff = GatedDiff::new(Arc::clone(&space), Stretch::default(), 0.0, 0.0, true);
        diff.w[0] = 0.8;
        let mut g = Graph::new();
        let u = NoiseDraw {
            per_param: vec![2.0 / 3.0],
            per_group: vec![2.0 / 3.0],
        };
        let td = train_delta(&mut g, &diff, &u).unwrap();
        assert_abs_diff_eq!(td.flatten(&g)[0], 0.2, epsilon = 1e-4);
    }

    #[test]
    fn expected_l0_total_examples() {
        let space = toy_space();
        // Symmetric stretch, alpha = 0: each of the 6 non-head coords
        // contributes 1/2; the unstructured total over 4 would be 2.0, so use
        // a 4-coordinate space for the quoted value.
        let small = Arc::new(
            FlatParamSpace::new(vec![
                seg("s", 0, &[4], 0, false),
                seg("head", 4, &[1], 1, true),
            ])
            .unwrap(),
        );
        let diff = GatedDiff::new(Arc::clone(&small), Stretch::default(), 0.0, 0.0, false);
        assert_abs_diff_eq!(expected_l0_total(&diff), 2.0, epsilon = 1e-12);

        // Structured, one group of 4, all alphas 0: each coordinate
        // contributes 0.25.
        let sdiff = GatedDiff::new(Arc::clone(&small), Stretch::default(), 0.0, 0.0, true);
        assert_abs_diff_eq!(expected_l0_total(&sdiff), 1.0, epsilon = 1e-12);

        // A slammed-shut group suppresses its members' contributions.
        let mut shut = GatedDiff::new(Arc::clone(&space), Stretch::default(), 0.0, 0.0, true);
        for a in &mut shut.structure.as_mut().unwrap().alpha {
            *a = -20.0;
        }
        let per_element = expected_l0_total(&shut) / space.nonhead_dim() as f64;
        assert!(per_element < 1e-8, "got {per_element}");
    }

    #[test]
    fn structured_total_approaches_unstructured_as_group_gates_saturate() {
        let space = toy_space();
        let mut diff = GatedDiff::new(Arc::clone(&space), Stretch::default(), 1.3, 0.0, true);
        for a in &mut diff.structure.as_mut().unwrap().alpha {
            *a = 30.0;
        }
        let unstructured = GatedDiff::new(space, Stretch::default(), 1.3, 0.0, false);
        assert!(
            (expected_l0_total(&diff) - expected_l0_total(&unstructured)).abs() < 1e-6,
            "saturated group gates should reduce to the unstructured total"
        );
    }

    #[test]
    fn graph_penalty_matches_host_penalty() {
        let space = toy_space();
        for structured in [false, true] {
            let mut diff =
                GatedDiff::new(Arc::clone(&space), Stretch::default(), 0.0, 0.0, structured);
            for (i, a) in diff.gate.alpha.iter_mut().enumerate() {
                *a = -1.0 + 0.37 * i as f32;
            }
            if let Some(p) = &mut diff.structure {
                p.alpha = vec![0.4, -0.8];
            }
            let mut g = Graph::new();
            let td = train_delta(&mut g, &diff, &noise(&diff, 0.5)).unwrap();
            let l0 = expected_l0_graph(&mut g, &diff, &td.leaves).unwrap();
            assert_abs_diff_eq!(
                g.item(l0) as f64,
                expected_l0_total(&diff),
                epsilon = 1e-5
            );
        }
    }

    #[test]
    fn finalize_extremes() {
        let space = toy_space();
        // All gates slammed shut, zero head weights: empty support.
        let mut diff = GatedDiff::new(Arc::clone(&space), Stretch::default(), -20.0, 0.0, false);
        for w in &mut diff.w[0..6] {
            *w = 1.0;
        }
        let dv = finalize(&diff, 11).unwrap();
        assert_eq!(dv.support_len(), 0);

        // Nonzero head weights are always stored, gates notwithstanding.
        diff.w[6] = 0.25;
        let dv = finalize(&diff, 11).unwrap();
        assert_eq!(dv.entries(), &[(6, 0.25)]);

        // Open gates keep every nonzero weight.
        let mut open = GatedDiff::new(Arc::clone(&space), Stretch::default(), 20.0, 0.0, false);
        for (i, w) in open.w.iter_mut().enumerate() {
            *w = 1.0 + i as f32;
        }
        let dv = finalize(&open, 11).unwrap();
        assert_eq!(dv.support_len(), space.dim());

        // Zero weights produce an empty diff even with open gates.
        let zero = GatedDiff::new(space, Stretch::default(), 20.0, 0.0, false);
        assert_eq!(finalize(&zero, 11).unwrap().support_len(), 0);
    }

    #[test]
    fn finalize_is_deterministic_in_the_seed() {
        let space = toy_space();
        let mut diff = GatedDiff::new(Arc::clone(&space), Stretch::default(), 0.5, 0.0, true);
        for (i, w) in diff.w.iter_mut().enumerate() {
            *w = 0.3 - 0.11 * i as f32;
        }
        let a = finalize(&diff, 99).unwrap();
        let b = finalize(&diff, 99).unwrap();
        assert_eq!(a, b);
        let c = finalize(&diff, 100).unwrap();
        assert_ne!(a, c, "different seed should draw different gates");
    }
}
