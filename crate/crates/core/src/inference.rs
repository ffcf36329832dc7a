//! Streaming sessions: iterative memory updates, one-off compression and
//! next-item ranking.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{gather_rows, item_logits, run_layout, MaskKind, ModelParams, SequenceLayout};
use crate::data::segment;
use crate::error::{Error, Result};
use crate::memory::{init_memory, update_memory, MemoryState, UpdateMode};
use crate::tensor::{Graph, Tensor};

/// How a session turns archived segments into memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionProtocol {
    /// One `update_memory` per completed segment.
    Iterative,
    /// Re-encode the whole archive in a single interleaved forward.
    OneOff,
}

impl std::str::FromStr for SessionProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        crate::error::parse_variant("session protocol", s)
    }
}

/// Catalog ranking: item ids by descending score, ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub items: Vec<u32>,
    pub scores: Vec<f32>,
}

impl Ranking {
    pub fn from_scores(scores: Vec<f32>) -> Self {
        let mut items: Vec<u32> = (0..scores.len() as u32).collect();
        items.sort_by(|&a, &b| {
            scores[b as usize]
                .total_cmp(&scores[a as usize])
                .then(a.cmp(&b))
        });
        Self { items, scores }
    }

    pub fn top(&self, k: usize) -> &[u32] {
        &self.items[..k.min(self.items.len())]
    }
}

/// Per-user streaming state.
#[derive(Clone, Debug)]
pub struct InferenceSession<'p> {
    params: &'p ModelParams,
    pub memory: Option<MemoryState>,
    pub working: Vec<u32>,
    archive: Vec<u32>,
    pub protocol: SessionProtocol,
    pub mode: UpdateMode,
    pub overlap: usize,
}

impl<'p> InferenceSession<'p> {
    pub fn new(
        params: &'p ModelParams,
        protocol: SessionProtocol,
        mode: UpdateMode,
        overlap: usize,
    ) -> Result<Self> {
        let l_seg = params.config.max_positions;
        if overlap >= l_seg {
            return Err(Error::Config(format!(
                "overlap {overlap} must be smaller than the segment length {l_seg}"
            )));
        }
        Ok(Self {
            params,
            memory: None,
            working: Vec::new(),
            archive: Vec::new(),
            protocol,
            mode,
            overlap,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.params.config.max_positions
    }

    /// Appends one interaction; a full working segment is absorbed at once.
    pub fn ingest(&mut self, item: u32) -> Result<()> {
        let n = self.params.config.n_items;
        if item as usize >= n {
            return Err(Error::Index {
                op: "ingest",
                index: item as usize,
                size: n,
            });
        }
        self.working.push(item);
        if self.working.len() == self.segment_len() {
            self.absorb()?;
        }
        Ok(())
    }

    pub fn ingest_all(&mut self, items: &[u32]) -> Result<()> {
        items.iter().try_for_each(|&i| self.ingest(i))
    }

    fn absorb(&mut self) -> Result<()> {
        let seg = std::mem::take(&mut self.working);
        self.memory = Some(match self.protocol {
            SessionProtocol::Iterative => match &self.memory {
                None => init_memory(self.params, &seg, self.mode)?,
                Some(m) => update_memory(self.params, m, &seg)?,
            },
            SessionProtocol::OneOff => {
                self.archive.extend_from_slice(&seg);
                oneoff_compress(&self.archive, self.params, self.mode)?
            }
        });
        self.working = seg[seg.len() - self.overlap..].to_vec();
        Ok(())
    }

    /// Ranks the catalog from the current memory and working segment.
    pub fn predict_next(&self) -> Result<Ranking> {
        self.rank_with_recent(&self.working)
    }

    /// Ranks the catalog from the current memory followed by `recent`,
    /// leaving the session untouched.
    pub fn rank_with_recent(&self, recent: &[u32]) -> Result<Ranking> {
        Ok(Ranking::from_scores(decode_scores(
            self.params,
            self.memory.as_ref().map(|m| &m.content),
            recent,
        )?))
    }
}

/// Next-item scores from `[memory; recent]` at the last slot.
pub fn decode_scores(
    params: &ModelParams,
    memory: Option<&Tensor<f32>>,
    recent: &[u32],
) -> Result<Vec<f32>> {
    let rows = memory.map_or(0, Tensor::rows);
    if rows == 0 && recent.is_empty() {
        return Err(Error::EmptySession);
    }
    let layout = SequenceLayout::decode(rows, recent);
    let mut g = Graph::inference();
    let bp = params.bind(&mut g);
    let mem = memory.map(|m| g.constant(m.clone()));
    let fwd = run_layout(&mut g, &bp, &layout, mem, MaskKind::Causal)?;
    let last = gather_rows(&mut g, fwd.hidden, &[layout.len() - 1])?;
    let logits = item_logits(&mut g, &bp, last)?;
    Ok(g.value(logits).data().to_vec())
}

/// Compresses every full segment of `prefix` in one interleaved forward.
/// A trailing partial segment is left out.
pub fn oneoff_compress(prefix: &[u32], params: &ModelParams, mode: UpdateMode) -> Result<MemoryState> {
    let l_seg = params.config.max_positions;
    let c = params.config.slots;
    let full = prefix.len() / l_seg;
    if full == 0 {
        return Err(Error::Memory(format!(
            "one-off compression needs at least {l_seg} items, got {}",
            prefix.len()
        )));
    }
    let segments = segment(&prefix[..full * l_seg], l_seg).segments;
    let layout = SequenceLayout::global(&segments, c);
    let mut g = Graph::inference();
    let bp = params.bind(&mut g);
    let fwd = run_layout(&mut g, &bp, &layout, None, MaskKind::Stage1)?;
    let blocks: Vec<usize> = match mode {
        UpdateMode::Overwrite => vec![full - 1],
        UpdateMode::Append => (0..full).collect(),
    };
    let mut rows = Vec::with_capacity(blocks.len() * c);
    for h in blocks {
        let start = layout
            .query_block(h)
            .ok_or_else(|| Error::Layout(format!("missing QUERY block {h}")))?;
        rows.extend(start..start + c);
    }
    let m = gather_rows(&mut g, fwd.hidden, &rows)?;
    let state = MemoryState {
        mode,
        slots: c,
        dim: params.config.d_model,
        content: g.value(m).clone(),
        segments_absorbed: full,
        user_id: None,
    };
    state.validate()?;
    Ok(state)
}

/// What a benchmark run exercises.
#[derive(Clone, Copy, Debug)]
pub enum BenchTarget<'a> {
    /// Plain model over the last `L_seg` items.
    Short(&'a ModelParams),
    /// Plain model over the whole context.
    Full(&'a ModelParams),
    /// Memory model: archived segments compressed, last segment raw.
    Memory(&'a ModelParams, UpdateMode),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub protocol: String,
    pub context_len: usize,
    pub samples: usize,
    pub predict_median_ms: f64,
    pub predict_p95_ms: f64,
    pub update_median_ms: Option<f64>,
    pub update_p95_ms: Option<f64>,
    /// Persisted state per user: the memory file, or raw item ids for plain models.
    pub bytes_per_user: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times `predict_next` (and memory updates) over `contexts`, `reps` times
/// each. `reps == 0` yields no reports.
pub fn bench(targets: &[BenchTarget<'_>], contexts: &[&[u32]], reps: usize) -> Result<Vec<BenchReport>> {
    if reps == 0 || contexts.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        let mut predict = Vec::new();
        let mut update = Vec::new();
        let mut bytes = 0;
        let mut context_len = 0;
        for _ in 0..reps {
            for ctx in contexts {
                context_len = ctx.len();
                match *target {
                    BenchTarget::Short(p) => {
                        let l = p.config.max_positions.min(ctx.len());
                        let t = Instant::now();
                        decode_scores(p, None, &ctx[ctx.len() - l..])?;
                        predict.push(ms(t));
                        bytes = l * 4;
                    }
                    BenchTarget::Full(p) => {
                        let l = p.config.max_positions.min(ctx.len());
                        let t = Instant::now();
                        decode_scores(p, None, &ctx[ctx.len() - l..])?;
                        predict.push(ms(t));
                        bytes = l * 4;
                    }
                    BenchTarget::Memory(p, mode) => {
                        let l_seg = p.config.max_positions;
                        let split = ctx.len().saturating_sub(l_seg) / l_seg * l_seg;
                        let mut state: Option<MemoryState> = None;
                        for seg in ctx[..split].chunks(l_seg) {
                            let t = Instant::now();
                            state = Some(match &state {
                                None => init_memory(p, seg, mode)?,
                                Some(m) => update_memory(p, m, seg)?,
                            });
                            update.push(ms(t));
                        }
                        let t = Instant::now();
                        decode_scores(p, state.as_ref().map(|m| &m.content), &ctx[split..])?;
                        predict.push(ms(t));
                        bytes = state.as_ref().map_or(0, MemoryState::file_bytes);
                    }
                }
            }
        }
        predict.sort_by(f64::total_cmp);
        update.sort_by(f64::total_cmp);
        let protocol = match target {
            BenchTarget::Short(_) => "short".to_string(),
            BenchTarget::Full(_) => "full".to_string(),
            BenchTarget::Memory(_, UpdateMode::Overwrite) => "memory-overwrite".to_string(),
            BenchTarget::Memory(_, UpdateMode::Append) => "memory-append".to_string(),
        };
        out.push(BenchReport {
            protocol,
            context_len,
            samples: predict.len(),
            predict_median_ms: quantile(&predict, 0.5),
            predict_p95_ms: quantile(&predict, 0.95),
            update_median_ms: (!update.is_empty()).then(|| quantile(&update, 0.5)),
            update_p95_ms: (!update.is_empty()).then(|| quantile(&update, 0.95)),
            bytes_per_user: bytes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    fn params() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                n_items: 12,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                slots: 2,
                max_positions: 4,
                with_memory: true,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let r = Ranking::from_scores(vec![0.5, 1.0, 0.5, 1.0]);
        assert_eq!(r.items, vec![1, 3, 0, 2]);
    }

    #[test]
    fn segment_trigger_and_overlap() {
        let p = params();
        let mut s = InferenceSession::new(&p, SessionProtocol::Iterative, UpdateMode::Append, 1).unwrap();
        s.ingest_all(&[1, 2, 3]).unwrap();
        assert!(s.memory.is_none());
        s.ingest(4).unwrap();
        assert_eq!(s.memory.as_ref().unwrap().segments_absorbed, 1);
        assert_eq!(s.working, vec![4]);
        assert!(InferenceSession::new(&p, SessionProtocol::Iterative, UpdateMode::Append, 4).is_err());
        assert!(s.ingest(99).is_err());
    }

    #[test]
    fn empty_session_cannot_predict() {
        let p = params();
        let s = InferenceSession::new(&p, SessionProtocol::Iterative, UpdateMode::Overwrite, 0).unwrap();
        assert!(matches!(s.predict_next(), Err(Error::EmptySession)));
    }

    #[test]
    fn oneoff_single_segment_matches_init() {
        let p = params();
        let a = oneoff_compress(&[1, 2, 3, 4], &p, UpdateMode::Overwrite).unwrap();
        let b = init_memory(&p, &[1, 2, 3, 4], UpdateMode::Overwrite).unwrap();
        assert!(a.content.max_abs_diff(&b.content) < 1e-5);
        assert!(oneoff_compress(&[1, 2], &p, UpdateMode::Overwrite).is_err());
    }

    #[test]
    fn bench_with_no_reps_is_empty() {
        let p = params();
        let ctx = [1u32, 2, 3, 4, 5, 6, 7, 8];
        assert!(bench(&[BenchTarget::Short(&p)], &[&ctx], 0).unwrap().is_empty());
        let r = bench(&[BenchTarget::Memory(&p, UpdateMode::Overwrite)], &[&ctx], 1).unwrap();
        assert_eq!(r[0].bytes_per_user, 18 + 2 * 8 * 4 + 4);
    }
}
