use std::rc::Rc;

use super::layout::{build_causal_mask, build_stage1_mask, Role, SequenceLayout};
use super::params::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::{Graph, MaskRows, Scalar, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Stage1,
}

/// Output of [`transformer_forward`]: final hidden states plus the attention
/// node of every layer (for probability export).
#[derive(Clone, Debug)]
pub struct Forward {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

/// Input embeddings for every slot of `layout`.
///
/// ITEM: item + position + role. QUERY: `Q_mem[c]` + slot + role.
/// MEMORY: content row + slot (`c mod C`) + role.
pub fn embed_layout<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    layout: &SequenceLayout,
    memory: Option<Var>,
) -> Result<Var> {
    let t = layout.len();
    let c = p.slots;
    let n_items = g.value(p.item_emb).rows();
    let mem_rows = memory.map_or(0, |m| g.value(m).rows());
    let mut item_idx = vec![None; t];
    let mut pos_idx = vec![None; t];
    let mut role_idx = vec![None; t];
    let mut q_idx = vec![None; t];
    let mut slot_idx = vec![None; t];
    let mut mem_idx = vec![None; t];
    for (i, s) in layout.slots().iter().enumerate() {
        role_idx[i] = Some(s.role as usize);
        match s.role {
            Role::Item => {
                let id = s
                    .item
                    .ok_or_else(|| Error::Layout(format!("ITEM slot {i} has no item id")))?
                    as usize;
                if id >= n_items {
                    return Err(Error::Index {
                        op: "item id",
                        index: id,
                        size: n_items,
                    });
                }
                if s.within >= p.max_positions {
                    return Err(Error::Index {
                        op: "item position",
                        index: s.within,
                        size: p.max_positions,
                    });
                }
                item_idx[i] = Some(id);
                pos_idx[i] = Some(s.within);
            }
            Role::Query => {
                if s.within >= c {
                    return Err(Error::Index {
                        op: "query slot",
                        index: s.within,
                        size: c,
                    });
                }
                q_idx[i] = Some(s.within);
                slot_idx[i] = Some(s.within);
            }
            Role::Memory => {
                if s.within >= mem_rows {
                    return Err(Error::Memory(format!(
                        "layout needs memory row {} but only {mem_rows} rows were supplied",
                        s.within
                    )));
                }
                mem_idx[i] = Some(s.within);
                slot_idx[i] = Some(s.within % c);
            }
        }
    }
    let mut sources = vec![
        (p.item_emb, item_idx),
        (p.pos_emb, pos_idx),
        (p.role_emb, role_idx),
        (p.q_mem, q_idx),
        (p.slot_emb, slot_idx),
    ];
    if let Some(m) = memory {
        sources.push((m, mem_idx));
    }
    // Drop sources that contribute nothing so their tables stay off the tape.
    sources.retain(|(_, idx)| idx.iter().any(Option::is_some));
    if sources.is_empty() {
        sources.push((p.role_emb, vec![None; t]));
    }
    g.embed_sum(t, sources)
}

pub fn mask_for(layout: &SequenceLayout, kind: MaskKind) -> Result<Rc<MaskRows>> {
    let mask = match kind {
        MaskKind::Causal => build_causal_mask(layout),
        MaskKind::Stage1 => build_stage1_mask(layout)?,
    };
    Ok(Rc::new(mask.to_rows()))
}

/// Pre-norm blocks `h += MHA(LN h)`, `h += FFN(LN h)`, then a final LN.
pub fn transformer_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    x: Var,
    mask: Rc<MaskRows>,
) -> Result<Forward> {
    let t = g.value(x).rows();
    if mask.len() != t {
        return Err(Error::Shape {
            op: "transformer_forward",
            lhs: g.shape(x).to_vec(),
            rhs: vec![mask.len(), mask.len()],
        });
    }
    let mut h = x;
    let mut attention = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let a = g.layer_norm(h, l.ln1_g, l.ln1_b, LN_EPS)?;
        let q = g.matmul(a, l.wq)?;
        let k = g.matmul(a, l.wk)?;
        let v = g.matmul(a, l.wv)?;
        let att = g.attention(q, k, v, mask.clone(), p.n_heads)?;
        attention.push(att);
        let o = g.matmul(att, l.wo)?;
        h = g.add(h, o)?;
        let b = g.layer_norm(h, l.ln2_g, l.ln2_b, LN_EPS)?;
        let f = g.matmul(b, l.ff1_w)?;
        let f = g.add_row(f, l.ff1_b)?;
        let f = g.gelu(f);
        let f = g.matmul(f, l.ff2_w)?;
        let f = g.add_row(f, l.ff2_b)?;
        h = g.add(h, f)?;
    }
    let hidden = g.layer_norm(h, p.lnf_g, p.lnf_b, LN_EPS)?;
    if !g.value(hidden).is_finite() {
        return Err(Error::NonFinite {
            op: "transformer_forward",
        });
    }
    Ok(Forward { hidden, attention })
}

/// Embeds `layout` and runs the transformer under the chosen mask.
pub fn run_layout<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    layout: &SequenceLayout,
    memory: Option<Var>,
    kind: MaskKind,
) -> Result<Forward> {
    let x = embed_layout(g, p, layout, memory)?;
    let mask = mask_for(layout, kind)?;
    transformer_forward(g, p, x, mask)
}

/// Scores over the whole catalog, `rows · item_embᵀ`.
pub fn item_logits<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, rows: Var) -> Result<Var> {
    g.matmul_nt(rows, p.item_emb)
}

/// Copies the given rows of `v` (differentiably).
pub fn gather_rows<T: Scalar>(g: &mut Graph<T>, v: Var, rows: &[usize]) -> Result<Var> {
    g.embed_sum(rows.len(), vec![(v, rows.iter().map(|&r| Some(r)).collect())])
}

/// Block-diagonal mask over independent layouts laid end to end.
pub fn batched_mask(parts: &[SequenceLayout], kind: MaskKind) -> Result<Rc<MaskRows>> {
    let mut rows = Vec::with_capacity(parts.iter().map(SequenceLayout::len).sum());
    let mut off = 0u32;
    for p in parts {
        let m = match kind {
            MaskKind::Causal => build_causal_mask(p),
            MaskKind::Stage1 => build_stage1_mask(p)?,
        };
        for i in 0..m.size() {
            rows.push(
                m.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(j, _)| off + j as u32)
                    .collect(),
            );
        }
        off += p.len() as u32;
    }
    Ok(Rc::new(MaskRows::new(rows)))
}

/// Runs several layouts in one forward. Returns the start row of each part.
///
/// MEMORY rows of part `i` index into `memory` after the rows of parts
/// `0..i`, as arranged by [`SequenceLayout::concat`].
pub fn run_batched<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    parts: &[SequenceLayout],
    memory: Option<Var>,
    kind: MaskKind,
) -> Result<(Forward, Vec<usize>)> {
    let layout = SequenceLayout::concat(parts);
    let x = embed_layout(g, p, &layout, memory)?;
    let mask = batched_mask(parts, kind)?;
    let mut starts = Vec::with_capacity(parts.len());
    let mut off = 0;
    for part in parts {
        starts.push(off);
        off += part.len();
    }
    Ok((transformer_forward(g, p, x, mask)?, starts))
}
