use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::MaskRows;

/// Slot type within a constructed input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Memory = 0,
    Item = 1,
    Query = 2,
}

/// One position of a [`SequenceLayout`].
///
/// `within` is the within-segment item position for ITEM slots, the query
/// index `c` for QUERY slots and the memory row for MEMORY slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub role: Role,
    pub segment: usize,
    pub within: usize,
    pub item: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceLayout {
    slots: Vec<Slot>,
}

impl SequenceLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn memory_rows(&self) -> usize {
        self.count(Role::Memory)
    }

    pub fn count(&self, role: Role) -> usize {
        self.slots.iter().filter(|s| s.role == role).count()
    }

    pub fn positions(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.role == role)
            .map(|(i, _)| i)
    }

    pub fn push_memory(&mut self, rows: usize) -> &mut Self {
        let start = self.memory_rows();
        for r in 0..rows {
            self.slots.push(Slot {
                role: Role::Memory,
                segment: 0,
                within: start + r,
                item: None,
            });
        }
        self
    }

    pub fn push_items(&mut self, segment: usize, items: &[u32]) -> &mut Self {
        for (i, &it) in items.iter().enumerate() {
            self.slots.push(Slot {
                role: Role::Item,
                segment,
                within: i,
                item: Some(it),
            });
        }
        self
    }

    pub fn push_queries(&mut self, segment: usize, slots: usize) -> &mut Self {
        for c in 0..slots {
            self.slots.push(Slot {
                role: Role::Query,
                segment,
                within: c,
                item: None,
            });
        }
        self
    }

    /// Plain item sequence with within-segment positions `0..len`.
    pub fn plain(items: &[u32]) -> Self {
        let mut l = Self::new();
        l.push_items(0, items);
        l
    }

    /// `[M; S]`, the decoder input.
    pub fn decode(memory_rows: usize, items: &[u32]) -> Self {
        let mut l = Self::new();
        l.push_memory(memory_rows).push_items(0, items);
        l
    }

    /// `[M; S; Q_mem]`, used both to encode memory and to predict in one pass.
    pub fn unified(memory_rows: usize, items: &[u32], slots: usize) -> Self {
        let mut l = Self::new();
        l.push_memory(memory_rows)
            .push_items(0, items)
            .push_queries(0, slots);
        l
    }

    /// `[S_0; Q_mem; S_1; Q_mem; ...]`.
    pub fn global<S: AsRef<[u32]>>(segments: &[S], slots: usize) -> Self {
        let mut l = Self::new();
        for (h, s) in segments.iter().enumerate() {
            l.push_items(h, s.as_ref()).push_queries(h, slots);
        }
        l
    }

    /// Start index of the QUERY block belonging to `segment`, if present.
    pub fn query_block(&self, segment: usize) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| s.role == Role::Query && s.segment == segment)
    }

    /// Start of the trailing QUERY block of exactly `slots` entries.
    pub fn trailing_query_block(&self, slots: usize) -> Result<usize> {
        let t = self.len();
        if slots == 0 || t < slots {
            return Err(Error::Layout("layout has no trailing QUERY block".into()));
        }
        let tail = &self.slots[t - slots..];
        let seg = tail[0].segment;
        let ok = tail
            .iter()
            .enumerate()
            .all(|(c, s)| s.role == Role::Query && s.within == c && s.segment == seg);
        if !ok {
            return Err(Error::Layout("layout has no trailing QUERY block".into()));
        }
        Ok(t - slots)
    }

    /// Concatenates independent layouts; MEMORY rows are renumbered so that
    /// they index into the row-concatenation of the per-layout contents.
    pub fn concat(parts: &[SequenceLayout]) -> Self {
        let mut out = Self::new();
        let mut mem_off = 0;
        for p in parts {
            for s in &p.slots {
                let mut s = *s;
                if s.role == Role::Memory {
                    s.within += mem_off;
                }
                out.slots.push(s);
            }
            mem_off += p.memory_rows();
        }
        out
    }
}

/// `t×t` boolean matrix, `true` where query row `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    t: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(t: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..t {
                allowed[i * t + j] = f(i, j);
            }
        }
        Self { t, allowed }
    }

    pub fn size(&self) -> usize {
        self.t
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.t + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.t..(i + 1) * self.t]
    }

    pub fn to_rows(&self) -> MaskRows {
        MaskRows::from_dense(self.t, &self.allowed)
    }

    /// Independent sequences side by side; no attention crosses blocks.
    pub fn block_diagonal(parts: &[AttentionMask]) -> Self {
        let t: usize = parts.iter().map(|p| p.t).sum();
        let mut allowed = vec![false; t * t];
        let mut off = 0;
        for p in parts {
            for i in 0..p.t {
                for j in 0..p.t {
                    allowed[(off + i) * t + off + j] = p.get(i, j);
                }
            }
            off += p.t;
        }
        Self { t, allowed }
    }
}

/// Standard lower-triangular mask.
pub fn build_causal_mask(layout: &SequenceLayout) -> AttentionMask {
    AttentionMask::from_fn(layout.len(), |i, j| j <= i)
}

/// Mask for the interleaved reference layout: ITEM slots see only earlier
/// ITEM slots; a QUERY slot sees every earlier ITEM slot plus the earlier
/// slots of its own QUERY block, never a previous block.
pub fn build_stage1_mask(layout: &SequenceLayout) -> Result<AttentionMask> {
    if layout.memory_rows() > 0 {
        return Err(Error::Layout(
            "reference layout must not contain MEMORY slots".into(),
        ));
    }
    let s = layout.slots();
    Ok(AttentionMask::from_fn(layout.len(), |i, j| {
        if j > i {
            return false;
        }
        match (s[i].role, s[j].role) {
            (_, Role::Item) => true,
            (Role::Query, Role::Query) => s[i].segment == s[j].segment,
            _ => false,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_single_and_triangular() {
        let m = build_causal_mask(&SequenceLayout::plain(&[3]));
        assert_eq!(m.size(), 1);
        assert!(m.get(0, 0));
        let m = build_causal_mask(&SequenceLayout::plain(&[1, 2, 3]));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), j <= i);
            }
        }
    }

    #[test]
    fn causal_on_unified_layout() {
        // [M(1); S(2); Q(1)]
        let l = SequenceLayout::unified(1, &[5, 6], 1);
        let m = build_causal_mask(&l);
        assert_eq!(m.row(3), &[true, true, true, true]);
        assert_eq!(m.row(0), &[true, false, false, false]);
        assert_eq!(m.row(2), &[true, true, true, false]);
    }

    #[test]
    fn stage1_two_segments_hand_rows() {
        // I I Q I I Q with L_seg=2, C=1
        let l = SequenceLayout::global(&[vec![1, 2], vec![3, 4]], 1);
        let m = build_stage1_mask(&l).unwrap();
        assert_eq!(m.row(5), &[true, true, false, true, true, true]);
        assert_eq!(m.row(2), &[true, true, true, false, false, false]);
        assert_eq!(m.row(3), &[true, true, false, true, false, false]);
        assert_eq!(m.row(4), &[true, true, false, true, true, false]);
    }

    #[test]
    fn stage1_single_segment_is_causal() {
        let l = SequenceLayout::global(&[vec![1, 2, 3]], 2);
        assert_eq!(build_stage1_mask(&l).unwrap(), build_causal_mask(&l));
    }

    #[test]
    fn stage1_queries_causal_within_block() {
        let l = SequenceLayout::global(&[vec![1], vec![2]], 3);
        let m = build_stage1_mask(&l).unwrap();
        // second block starts at 5: slots 5,6,7
        assert!(m.get(7, 5) && m.get(7, 6) && !m.get(5, 6));
        assert!(!m.get(7, 1) && !m.get(7, 3));
    }

    #[test]
    fn stage1_rejects_memory() {
        let l = SequenceLayout::unified(2, &[1], 2);
        assert!(build_stage1_mask(&l).is_err());
    }

    #[test]
    fn trailing_block_detection() {
        let l = SequenceLayout::unified(0, &[1, 2], 2);
        assert_eq!(l.trailing_query_block(2).unwrap(), 2);
        assert!(SequenceLayout::plain(&[1]).trailing_query_block(1).is_err());
    }

    #[test]
    fn concat_renumbers_memory() {
        let a = SequenceLayout::unified(2, &[1], 2);
        let b = SequenceLayout::unified(4, &[2], 2);
        let c = SequenceLayout::concat(&[a, b]);
        let mem: Vec<usize> = c
            .slots()
            .iter()
            .filter(|s| s.role == Role::Memory)
            .map(|s| s.within)
            .collect();
        assert_eq!(mem, vec![0, 1, 2, 3, 4, 5]);
    }
}
