//! Flat parameter space: one contiguous coordinate range per model, tiled by
//! named segments.
//!
//! Every trainable array of a model registers exactly once as a [`Segment`]
//! with a byte-free flat view: offset, length, logical shape, a layer index
//! for attribution reports, and a head flag. Head segments (task output
//! layers) ride along in the same space but are exempt from gating, from the
//! sparsity penalty, and from projection budgets — they are always trained
//! and always shipped.
//!
//! [`GroupPartition`] splits the non-head index range into disjoint groups
//! for structured gating. The default grouping is one group per non-head
//! segment, i.e. each weight matrix or bias vector can be switched off as a
//! unit.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    pub layer: u16,
    pub head: bool,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatParamSpace {
    dim: usize,
    segments: Vec<Segment>,
}

impl FlatParamSpace {
    /// Validates that the segments tile `[0, dim)` exactly: ascending
    /// offsets, no gaps, no overlap, shapes consistent with lengths, unique
    /// names, and at least one non-head segment.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::BadSpace {
                reason: "no segments".into(),
            });
        }
        let mut cursor = 0usize;
        for s in &segments {
            if s.offset != cursor {
                return Err(Error::BadSpace {
                    reason: format!(
                        "segment `{}` starts at {} but previous segment ends at {}",
                        s.name, s.offset, cursor
                    ),
                });
            }
            if s.len == 0 {
                return Err(Error::BadSpace {
                    reason: format!("segment `{}` is empty", s.name),
                });
            }
            if s.shape.iter().product::<usize>() != s.len {
                return Err(Error::BadSpace {
                    reason: format!(
                        "segment `{}` shape {:?} does not multiply to length {}",
                        s.name, s.shape, s.len
                    ),
                });
            }
            cursor += s.len;
        }
        for (i, a) in segments.iter().enumerate() {
            if segments[i + 1..].iter().any(|b| b.name == a.name) {
                return Err(Error::BadSpace {
                    reason: format!("duplicate segment name `{}`", a.name),
                });
            }
        }
        if segments.iter().all(|s| s.head) {
            return Err(Error::BadSpace {
                reason: "space has no non-head segments".into(),
            });
        }
        Ok(FlatParamSpace {
            dim: cursor,
            segments,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn head_dim(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.head)
            .map(|s| s.len)
            .sum()
    }

    /// Dimension that sparsity targets apply to: everything except heads.
    pub fn nonhead_dim(&self) -> usize {
        self.dim - self.head_dim()
    }

    pub fn segment_of(&self, pos: usize) -> &Segment {
        debug_assert!(pos < self.dim);
        let idx = self
            .segments
            .partition_point(|s| s.offset + s.len <= pos);
        &self.segments[idx]
    }

    pub fn is_head(&self, pos: usize) -> bool {
        self.segment_of(pos).head
    }

    /// Highest layer index among non-head segments — the layer the
    /// last-layer baseline trains alongside the heads.
    pub fn penultimate_layer(&self) -> u16 {
        self.segments
            .iter()
            .filter(|s| !s.head)
            .map(|s| s.layer)
            .max()
            .expect("validated: at least one non-head segment")
    }

    /// All layer indices present, ascending and deduplicated.
    pub fn layers(&self) -> Vec<u16> {
        let mut out: Vec<u16> = self.segments.iter().map(|s| s.layer).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Non-head flat indices in ascending order.
    pub fn nonhead_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nonhead_dim());
        for s in &self.segments {
            if !s.head {
                out.extend(s.range());
            }
        }
        out
    }
}

/// Disjoint groups covering the non-head index range, with one gate location
/// parameter per group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    /// Per-group gate location, trained jointly with the per-parameter ones.
    pub alpha: Vec<f32>,
    /// Flat index -> group index; `NO_GROUP` marks head positions.
    index_to_group: Vec<u32>,
}

const NO_GROUP: u32 = u32::MAX;

impl GroupPartition {
    pub fn new(space: &FlatParamSpace, groups: Vec<Vec<usize>>, alpha_init: f32) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::BadPartition {
                reason: "no groups".into(),
            });
        }
        if groups.len() > NO_GROUP as usize {
            return Err(Error::BadPartition {
                reason: "too many groups".into(),
            });
        }
        let mut index_to_group = vec![NO_GROUP; space.dim()];
        let mut covered = 0usize;
        for (j, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::BadPartition {
                    reason: format!("group {j} is empty"),
                });
            }
            for &i in g {
                if i >= space.dim() {
                    return Err(Error::BadPartition {
                        reason: format!("group {j} contains out-of-range index {i}"),
                    });
                }
                if space.is_head(i) {
                    return Err(Error::BadPartition {
                        reason: format!("group {j} contains head index {i}"),
                    });
                }
                if index_to_group[i] != NO_GROUP {
                    return Err(Error::BadPartition {
                        reason: format!("index {i} appears in more than one group"),
                    });
                }
                index_to_group[i] = j as u32;
                covered += 1;
            }
        }
        if covered != space.nonhead_dim() {
            let gap = space
                .nonhead_positions()
                .into_iter()
                .find(|&i| index_to_group[i] == NO_GROUP)
                .expect("count mismatch implies an uncovered index");
            return Err(Error::UngroupedIndex { index: gap });
        }
        let mut groups = groups;
        for g in &mut groups {
            g.sort_unstable();
        }
        Ok(GroupPartition {
            alpha: vec![alpha_init; groups.len()],
            groups,
            index_to_group,
        })
    }

    /// Default structured grouping: one group per non-head segment.
    pub fn per_segment(space: &FlatParamSpace, alpha_init: f32) -> Self {
        let groups: Vec<Vec<usize>> = space
            .segments()
            .iter()
            .filter(|s| !s.head)
            .map(|s| s.range().collect())
            .collect();
        Self::new(space, groups, alpha_init).expect("segment ranges partition the non-head space")
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, pos: usize) -> Option<usize> {
        match self.index_to_group.get(pos) {
            Some(&g) if g != NO_GROUP => Some(g as usize),
            _ => None,
        }
    }

    /// Group index of every non-head segment, requiring each segment to lie
    /// entirely inside one group. Training-time gate tiling works per
    /// segment, so a partition that splits a segment cannot be trained
    /// against (analysis functions still accept it).
    pub fn segment_groups(&self, space: &FlatParamSpace) -> Result<Vec<Option<usize>>> {
        let mut out = Vec::with_capacity(space.segments().len());
        for s in space.segments() {
            if s.head {
                out.push(None);
                continue;
            }
            let j = self
                .group_of(s.offset)
                .ok_or(Error::UngroupedIndex { index: s.offset })?;
            for i in s.range() {
                if self.group_of(i) != Some(j) {
                    return Err(Error::BadPartition {
                        reason: format!(
                            "segment `{}` spans more than one group (index {i})",
                            s.name
                        ),
                    });
                }
            }
            out.push(Some(j));
        }
        Ok(out)
    }
}

/// Convenience builder used by the toy models and many tests.
pub fn seg(name: &str, offset: usize, shape: &[usize], layer: u16, head: bool) -> Segment {
    Segment {
        name: name.into(),
        offset,
        len: shape.iter().product(),
        shape: shape.to_vec(),
        layer,
        head,
    }
}

// ─── tests ───

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_space() -> FlatParamSpace {
        FlatParamSpace::new(vec![
            seg("enc.w", 0, &[2, 3], 0, false),
            seg("enc.b", 6, &[3], 0, false),
            seg("head.w", 9, &[3, 2], 1, true),
        ])
        .unwrap()
    }

    #[test]
    fn dimensions_split_into_head_and_nonhead() {
        let s = toy_space();
        assert_eq!(s.dim(), 15);
        assert_eq!(s.head_dim(), 6);
        assert_eq!(s.nonhead_dim(), 9);
        assert_eq!(s.nonhead_positions(), (0..9).collect::<Vec<_>>());
        assert_eq!(s.penultimate_layer(), 0);
    }

    #[test]
    fn segment_lookup_by_position() {
        let s = toy_space();
        assert_eq!(s.segment_of(0).name, "enc.w");
        assert_eq!(s.segment_of(5).name, "enc.w");
        assert_eq!(s.segment_of(6).name, "enc.b");
        assert_eq!(s.segment_of(14).name, "head.w");
        assert!(s.is_head(9));
        assert!(!s.is_head(8));
    }

    #[test]
    fn gaps_and_overlaps_are_rejected() {
        let gap = FlatParamSpace::new(vec![
            seg("a", 0, &[4], 0, false),
            seg("b", 5, &[2], 0, false),
        ]);
        assert!(matches!(gap, Err(Error::BadSpace { .. })));
        let overlap = FlatParamSpace::new(vec![
            seg("a", 0, &[4], 0, false),
            seg("b", 3, &[2], 0, false),
        ]);
        assert!(matches!(overlap, Err(Error::BadSpace { .. })));
    }

    #[test]
    fn default_grouping_is_one_group_per_nonhead_segment() {
        let space = FlatParamSpace::new(vec![
            seg("a", 0, &[4], 0, false),
            seg("b", 4, &[2, 3], 0, false),
            seg("c", 10, &[5], 1, false),
            seg("d", 15, &[3], 1, false),
            seg("e", 18, &[2], 2, false),
            seg("f", 20, &[7], 2, false),
            seg("head", 27, &[3], 3, true),
        ])
        .unwrap();
        let p = GroupPartition::per_segment(&space, 5.0);
        assert_eq!(p.n_groups(), 6);
        assert_eq!(p.group_of(0), Some(0));
        assert_eq!(p.group_of(26), Some(5));
        assert_eq!(p.group_of(27), None, "head positions carry no group");
        // Single non-head segment degenerates to one group.
        let single = FlatParamSpace::new(vec![
            seg("only", 0, &[8], 0, false),
            seg("head", 8, &[2], 1, true),
        ])
        .unwrap();
        assert_eq!(GroupPartition::per_segment(&single, 5.0).n_groups(), 1);
    }

    #[test]
    fn partition_must_cover_exactly() {
        let space = toy_space();
        let missing = GroupPartition::new(&space, vec![(0..8).collect()], 5.0);
        assert!(matches!(missing, Err(Error::UngroupedIndex { index: 8 })));
        let overlapping =
            GroupPartition::new(&space, vec![(0..6).collect(), (5..9).collect()], 5.0);
        assert!(matches!(overlapping, Err(Error::BadPartition { .. })));
        let head_index = GroupPartition::new(&space, vec![(0..10).collect()], 5.0);
        assert!(matches!(head_index, Err(Error::BadPartition { .. })));
    }

    #[test]
    fn segment_alignment_check_catches_split_segments() {
        let space = toy_space();
        // enc.w is split across two groups: fine for analysis, not trainable.
        let p = GroupPartition::new(&space, vec![(0..3).collect(), (3..9).collect()], 5.0).unwrap();
        assert!(matches!(
            p.segment_groups(&space),
            Err(Error::BadPartition { .. })
        ));
        let aligned = GroupPartition::per_segment(&space, 5.0);
        assert_eq!(
            aligned.segment_groups(&space).unwrap(),
            vec![Some(0), Some(1), None]
        );
    }
}
