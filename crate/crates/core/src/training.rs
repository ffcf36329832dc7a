//! Two-stage self-referential teacher forcing, its losses, and the
//! serial and plain baselines.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    gather_rows, item_logits, run_batched, BoundParams, MaskKind, ModelConfig, ModelParams,
    SequenceLayout,
};
use crate::data::{segment, split_leave_one_out, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalProtocol, Split};
use crate::memory::UpdateMode;
use crate::tensor::{AdamW, AdamWConfig, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    Rec2pm,
    TokSerial,
    PlainShort,
    PlainFull,
}

impl std::str::FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        crate::error::parse_variant("trainer", s)
    }
}

impl TrainerKind {
    pub fn uses_memory(self) -> bool {
        matches!(self, Self::Rec2pm | Self::TokSerial)
    }
}

/// Reduction applied inside the consistency loss. Only the per-element mean
/// is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MseReduction {
    #[default]
    Mean,
}

impl std::str::FromStr for MseReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        crate::error::parse_variant("mse reduction", s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub l_seg: usize,
    pub l_full: usize,
    /// Memory slots `C`.
    pub slots: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Consistency weight λ.
    pub lambda: f64,
    pub mode: UpdateMode,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub trainer: TrainerKind,
    pub recon_weight: f64,
    pub mse_reduction: MseReduction,
    /// Users scored for early stopping each epoch; 0 means all.
    pub max_valid_users: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l_seg: 16,
            l_full: 64,
            slots: 4,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            lr: 1e-3,
            weight_decay: 0.1,
            batch_size: 16,
            lambda: 1.0,
            mode: UpdateMode::Overwrite,
            epochs: 20,
            early_stop_patience: 10,
            seed: 0,
            trainer: TrainerKind::Rec2pm,
            recon_weight: 0.0,
            mse_reduction: MseReduction::Mean,
            max_valid_users: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.l_seg == 0 || self.l_full == 0 {
            return bad("l_seg and l_full must be positive".into());
        }
        if self.l_full % self.l_seg != 0 {
            return bad(format!(
                "l_full {} is not a multiple of l_seg {}",
                self.l_full, self.l_seg
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return bad(format!(
                "recon_weight must be finite and >= 0, got {}",
                self.recon_weight
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        self.model_config(1).validate()
    }

    /// Architecture for a catalog of `n_items`. Only the full-context
    /// baseline needs a position table longer than one segment.
    pub fn model_config(&self, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_items,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            slots: self.slots,
            max_positions: if self.trainer == TrainerKind::PlainFull {
                self.l_full
            } else {
                self.l_seg
            },
            with_memory: self.trainer.uses_memory(),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn eval_options(&self, split: Split) -> EvalOptions {
        EvalOptions {
            l_seg: self.l_seg,
            l_full: self.l_full,
            mode: self.mode,
            overlap: self.l_seg / 4,
            split,
            max_users: 0,
        }
    }

    /// Protocol monitored for early stopping.
    pub fn validation_protocol(&self) -> EvalProtocol {
        match self.trainer {
            TrainerKind::Rec2pm | TrainerKind::TokSerial => EvalProtocol::MemIterative,
            TrainerKind::PlainShort => EvalProtocol::Short,
            TrainerKind::PlainFull => EvalProtocol::Full,
        }
    }
}

/// The most recent `l_full + 1` items of a user's training prefix: every
/// item but the last is an input, every item but the first a target.
pub fn training_sequence(items: &[u32], l_full: usize) -> Result<&[u32]> {
    let (train, _, _) = split_leave_one_out(items)?;
    Ok(&train[train.len().saturating_sub(l_full + 1)..])
}

/// Next-item target of every position: inside the segment, then across the
/// boundary; the very last item has none.
pub fn segment_targets<S: AsRef<[u32]>>(segments: &[S]) -> Vec<Vec<Option<u32>>> {
    (0..segments.len())
        .map(|h| {
            let s = segments[h].as_ref();
            (0..s.len())
                .map(|i| {
                    s.get(i + 1).copied().or_else(|| {
                        segments
                            .get(h + 1)
                            .and_then(|n| n.as_ref().first().copied())
                    })
                })
                .collect()
        })
        .collect()
}

/// Loss terms of one step, as graph nodes.
#[derive(Clone, Debug)]
pub struct StepLosses {
    pub total: Var,
    pub ar: Var,
    pub con: Var,
    pub recon: Var,
    pub m_ref: Vec<Var>,
    pub m_upd: Vec<Var>,
    /// Whether stage-2 contexts came from reference memories only.
    pub teacher_forced: bool,
}

/// Numeric view of [`StepLosses`].
#[derive(Clone, Debug)]
pub struct TrainStepOutput<T = f32> {
    pub loss_total: f64,
    pub loss_ar: f64,
    pub loss_con: f64,
    pub loss_recon: f64,
    pub m_ref: Vec<Tensor<T>>,
    pub m_upd: Vec<Tensor<T>>,
    pub teacher_forced: bool,
}

impl StepLosses {
    pub fn output<T: Scalar>(&self, g: &Graph<T>) -> TrainStepOutput<T> {
        let f = |v: Var| g.value(v).item().as_f64();
        TrainStepOutput {
            loss_total: f(self.total),
            loss_ar: f(self.ar),
            loss_con: f(self.con),
            loss_recon: f(self.recon),
            m_ref: self.m_ref.iter().map(|&v| g.value(v).clone()).collect(),
            m_upd: self.m_upd.iter().map(|&v| g.value(v).clone()).collect(),
            teacher_forced: self.teacher_forced,
        }
    }
}

/// One forward of every user's interleaved layout `[S_0; Q; S_1; Q; ...]`
/// under the reference mask. Returns `m_ref_h` for every user and segment.
pub fn stage1_reference_pass<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    batch: &[Vec<Vec<u32>>],
) -> Result<Vec<Vec<Var>>> {
    let c = p.slots;
    let layouts: Vec<SequenceLayout> = batch
        .iter()
        .map(|segs| SequenceLayout::global(segs, c))
        .collect();
    let (fwd, starts) = run_batched(g, p, &layouts, None, MaskKind::Stage1)?;
    let mut out = Vec::with_capacity(batch.len());
    for (u, segs) in batch.iter().enumerate() {
        let mut refs = Vec::with_capacity(segs.len());
        for h in 0..segs.len() {
            let q = layouts[u]
                .query_block(h)
                .ok_or_else(|| Error::Layout(format!("missing QUERY block {h}")))?;
            let rows: Vec<usize> = (starts[u] + q..starts[u] + q + c).collect();
            refs.push(gather_rows(g, fwd.hidden, &rows)?);
        }
        out.push(refs);
    }
    Ok(out)
}

/// `M_ref_{h-1}`: the latest reference memory (overwrite) or all of
/// `m_ref_0..m_ref_{h-1}` stacked (append).
pub fn build_reference_context<T: Scalar>(
    g: &mut Graph<T>,
    m_refs: &[Var],
    h: usize,
    mode: UpdateMode,
) -> Result<Var> {
    if h == 0 || h >= m_refs.len() {
        return Err(Error::Index {
            op: "reference context",
            index: h,
            size: m_refs.len(),
        });
    }
    match mode {
        UpdateMode::Overwrite => Ok(m_refs[h - 1]),
        UpdateMode::Append => g.concat_rows(&m_refs[..h]),
    }
}

/// Mean over pairs of the per-element squared difference. References are
/// detached: they act as fixed teachers here.
pub fn consistency_loss<T: Scalar>(g: &mut Graph<T>, m_refs: &[Var], m_upds: &[Var]) -> Result<Var> {
    if m_refs.len() != m_upds.len() {
        return Err(Error::Shape {
            op: "consistency_loss",
            lhs: vec![m_refs.len()],
            rhs: vec![m_upds.len()],
        });
    }
    if m_refs.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mut terms = Vec::with_capacity(m_refs.len());
    for (&r, &u) in m_refs.iter().zip(m_upds) {
        let r = g.detach(r);
        terms.push(g.mse(u, r)?);
    }
    let n = terms.len();
    let s = g.add_all(&terms)?;
    Ok(g.scale(s, T::of(1.0 / n as f64)))
}

/// Cross-entropy over `(row, target)` pairs of a hidden-state matrix.
fn ar_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    hidden: Var,
    picks: &[(usize, u32)],
) -> Result<Var> {
    if picks.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let rows: Vec<usize> = picks.iter().map(|&(r, _)| r).collect();
    let targets: Vec<usize> = picks.iter().map(|&(_, t)| t as usize).collect();
    let h = gather_rows(g, hidden, &rows)?;
    let logits = item_logits(g, p, h)?;
    g.cross_entropy(logits, &targets)
}

/// Decodes every `segment` from `[memory; segment]`: the last memory slot
/// predicts the first item, each item predicts its successor.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    pairs: &[(Var, &[u32])],
) -> Result<Var> {
    let mut layouts = Vec::with_capacity(pairs.len());
    let mut mems = Vec::with_capacity(pairs.len());
    for &(m, items) in pairs {
        let rows = g.value(m).rows();
        if rows == 0 || items.is_empty() {
            return Err(Error::Memory("reconstruction needs memory and items".into()));
        }
        layouts.push(SequenceLayout::decode(rows, items));
        mems.push(m);
    }
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let memory = g.concat_rows(&mems)?;
    let (fwd, starts) = run_batched(g, p, &layouts, Some(memory), MaskKind::Causal)?;
    let mut picks = Vec::new();
    for ((layout, &(_, items)), &start) in layouts.iter().zip(pairs).zip(&starts) {
        let first = start + layout.memory_rows() - 1;
        for (j, &it) in items.iter().enumerate() {
            picks.push((first + j, it));
        }
    }
    ar_loss(g, p, fwd.hidden, &picks)
}

/// Stage-2 settings taken from [`TrainConfig`].
#[derive(Clone, Copy, Debug)]
pub struct Stage2Config {
    pub l_seg: usize,
    pub mode: UpdateMode,
    pub lambda: f64,
    pub recon_weight: f64,
}

impl From<&TrainConfig> for Stage2Config {
    fn from(c: &TrainConfig) -> Self {
        Self {
            l_seg: c.l_seg,
            mode: c.mode,
            lambda: c.lambda,
            recon_weight: c.recon_weight,
        }
    }
}

/// Every `E_local,h = [M_ref_{h-1}; S_h; Q_mem]` of the batch in one forward.
///
/// `order` optionally permutes the (user, segment) instances before they are
/// laid out; no loss value depends on it.
pub fn stage2_parallel_pass<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    batch: &[Vec<Vec<u32>>],
    m_refs: &[Vec<Var>],
    cfg: &Stage2Config,
    order: Option<&[usize]>,
) -> Result<StepLosses> {
    if m_refs.len() != batch.len() || batch.iter().zip(m_refs).any(|(s, r)| s.len() != r.len()) {
        return Err(Error::Config(
            "reference memories do not match the segment batch".into(),
        ));
    }
    let c = p.slots;
    let mut instances = Vec::new();
    let mut targets = Vec::with_capacity(batch.len());
    for (u, segs) in batch.iter().enumerate() {
        let t = segment_targets(segs);
        for h in 0..segs.len() {
            let full = segs[h].len() == cfg.l_seg;
            if full || t[h].iter().any(Option::is_some) {
                instances.push((u, h));
            }
        }
        targets.push(t);
    }
    if let Some(order) = order {
        let mut seen = vec![false; instances.len()];
        if order.len() != instances.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Config(format!(
                "order must permute the {} stage-2 instances",
                instances.len()
            )));
        }
        instances = order.iter().map(|&i| instances[i]).collect();
    }

    let mut layouts = Vec::with_capacity(instances.len());
    let mut contexts = Vec::new();
    for &(u, h) in &instances {
        let rows = if h == 0 {
            0
        } else {
            let m = build_reference_context(g, &m_refs[u], h, cfg.mode)?;
            contexts.push(m);
            g.value(m).rows()
        };
        layouts.push(SequenceLayout::unified(rows, &batch[u][h], c));
    }
    let memory = if contexts.is_empty() {
        None
    } else {
        Some(g.concat_rows(&contexts)?)
    };
    let (fwd, starts) = run_batched(g, p, &layouts, memory, MaskKind::Causal)?;

    let mut picks = Vec::new();
    let mut m_ref = Vec::new();
    let mut m_upd = Vec::new();
    let mut recon_pairs = Vec::new();
    for (i, &(u, h)) in instances.iter().enumerate() {
        let base = starts[i] + layouts[i].memory_rows();
        for (j, t) in targets[u][h].iter().enumerate() {
            if let Some(t) = *t {
                picks.push((base + j, t));
            }
        }
        if batch[u][h].len() == cfg.l_seg {
            let q = starts[i] + layouts[i].trailing_query_block(c)?;
            let rows: Vec<usize> = (q..q + c).collect();
            m_upd.push(gather_rows(g, fwd.hidden, &rows)?);
            m_ref.push(m_refs[u][h]);
            recon_pairs.push((m_refs[u][h], batch[u][h].as_slice()));
        }
    }
    let ar = ar_loss(g, p, fwd.hidden, &picks)?;
    let con = consistency_loss(g, &m_ref, &m_upd)?;
    let recon = if cfg.recon_weight > 0.0 {
        reconstruction_loss(g, p, &recon_pairs)?
    } else {
        g.constant(Tensor::scalar(T::zero()))
    };
    let total = combine(g, ar, con, cfg.lambda, recon, cfg.recon_weight)?;
    Ok(StepLosses {
        total,
        ar,
        con,
        recon,
        m_ref,
        m_upd,
        teacher_forced: true,
    })
}

/// `L_AR + λ·L_con + w·L_rec`; zero-weight terms stay off the tape.
fn combine<T: Scalar>(g: &mut Graph<T>, ar: Var, con: Var, lambda: f64, recon: Var, w: f64) -> Result<Var> {
    let mut terms = vec![ar];
    if lambda > 0.0 {
        terms.push(g.scale(con, T::of(lambda)));
    }
    if w > 0.0 {
        terms.push(g.scale(recon, T::of(w)));
    }
    g.add_all(&terms)
}

/// Segments every user's training sequence.
pub fn segment_batch(seqs: &[&[u32]], l_seg: usize) -> Vec<Vec<Vec<u32>>> {
    seqs.iter().map(|s| segment(s, l_seg).segments).collect()
}

/// Stage 1 then stage 2 on one batch of training sequences.
pub fn rec2pm_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    seqs: &[&[u32]],
    cfg: &Stage2Config,
) -> Result<StepLosses> {
    let batch = segment_batch(seqs, cfg.l_seg);
    let refs = stage1_reference_pass(g, p, &batch)?;
    stage2_parallel_pass(g, p, &batch, &refs, cfg, None)
}

/// Per-segment pieces of the serially unrolled baseline.
#[derive(Clone, Debug)]
pub struct SerialPass {
    /// Input embeddings of each segment step (stacked over the batch).
    pub embeddings: Vec<Var>,
    /// Summed cross-entropy of each segment step.
    pub segment_losses: Vec<Var>,
    pub targets_per_segment: Vec<usize>,
    pub losses: StepLosses,
}

/// Processes segments in order, feeding each step's memory to the next as a
/// detached constant.
pub fn serial_pass<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    seqs: &[&[u32]],
    l_seg: usize,
    mode: UpdateMode,
) -> Result<SerialPass> {
    let c = p.slots;
    let batch = segment_batch(seqs, l_seg);
    let targets: Vec<_> = batch.iter().map(|s| segment_targets(s)).collect();
    let steps = batch.iter().map(Vec::len).max().unwrap_or(0);
    let mut memory: Vec<Option<Var>> = vec![None; batch.len()];
    let mut embeddings = Vec::new();
    let mut segment_losses = Vec::new();
    let mut counts = Vec::new();
    for h in 0..steps {
        let users: Vec<usize> = (0..batch.len()).filter(|&u| h < batch[u].len()).collect();
        let mut layouts = Vec::with_capacity(users.len());
        let mut mems = Vec::new();
        for &u in &users {
            let rows = memory[u].map_or(0, |m| g.value(m).rows());
            if let Some(m) = memory[u] {
                mems.push(m);
            }
            layouts.push(SequenceLayout::unified(rows, &batch[u][h], c));
        }
        let mem = if mems.is_empty() {
            None
        } else {
            Some(g.concat_rows(&mems)?)
        };
        let layout = SequenceLayout::concat(&layouts);
        let x = crate::backbone::embed_layout(g, p, &layout, mem)?;
        embeddings.push(x);
        let mask = crate::backbone::batched_mask(&layouts, MaskKind::Causal)?;
        let fwd = crate::backbone::transformer_forward(g, p, x, mask)?;
        let mut picks = Vec::new();
        let mut off = 0;
        for (i, &u) in users.iter().enumerate() {
            let base = off + layouts[i].memory_rows();
            for (j, t) in targets[u][h].iter().enumerate() {
                if let Some(t) = *t {
                    picks.push((base + j, t));
                }
            }
            if batch[u][h].len() == l_seg {
                let q = off + layouts[i].trailing_query_block(c)?;
                let rows: Vec<usize> = (q..q + c).collect();
                let m = gather_rows(g, fwd.hidden, &rows)?;
                let m = g.detach(m);
                memory[u] = Some(match (mode, memory[u].take()) {
                    (UpdateMode::Append, Some(prev)) => g.concat_rows(&[prev, m])?,
                    _ => m,
                });
            }
            off += layouts[i].len();
        }
        let mean = ar_loss(g, p, fwd.hidden, &picks)?;
        segment_losses.push(g.scale(mean, T::of(picks.len() as f64)));
        counts.push(picks.len());
    }
    let n: usize = counts.iter().sum();
    let sum = g.add_all(&segment_losses)?;
    let ar = g.scale(sum, T::of(if n == 0 { 0.0 } else { 1.0 / n as f64 }));
    let zero = g.constant(Tensor::scalar(T::zero()));
    Ok(SerialPass {
        embeddings,
        segment_losses,
        targets_per_segment: counts,
        losses: StepLosses {
            total: ar,
            ar,
            con: zero,
            recon: zero,
            m_ref: Vec::new(),
            m_upd: Vec::new(),
            teacher_forced: false,
        },
    })
}

/// Next-item loss of a plain model over independent windows (positions
/// restart at 0 in every window).
pub fn plain_pass<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    seqs: &[&[u32]],
    window: usize,
) -> Result<StepLosses> {
    let mut layouts = Vec::new();
    let mut window_targets = Vec::new();
    for s in seqs {
        let chunks = segment(s, window).segments;
        let t = segment_targets(&chunks);
        for (chunk, t) in chunks.iter().zip(t) {
            if t.iter().any(Option::is_some) {
                layouts.push(SequenceLayout::plain(chunk));
                window_targets.push(t);
            }
        }
    }
    let zero = g.constant(Tensor::scalar(T::zero()));
    if layouts.is_empty() {
        return Ok(StepLosses {
            total: zero,
            ar: zero,
            con: zero,
            recon: zero,
            m_ref: Vec::new(),
            m_upd: Vec::new(),
            teacher_forced: false,
        });
    }
    let (fwd, starts) = run_batched(g, p, &layouts, None, MaskKind::Causal)?;
    let mut picks = Vec::new();
    for (start, t) in starts.iter().zip(&window_targets) {
        for (j, t) in t.iter().enumerate() {
            if let Some(t) = *t {
                picks.push((start + j, t));
            }
        }
    }
    let ar = ar_loss(g, p, fwd.hidden, &picks)?;
    Ok(StepLosses {
        total: ar,
        ar,
        con: zero,
        recon: zero,
        m_ref: Vec::new(),
        m_upd: Vec::new(),
        teacher_forced: false,
    })
}

/// Training instances a plain model sees for one sequence.
pub fn plain_instances(seq: &[u32], window: usize) -> usize {
    let chunks = segment(seq, window).segments;
    segment_targets(&chunks)
        .iter()
        .filter(|t| t.iter().any(Option::is_some))
        .count()
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss_total: f64,
    pub loss_ar: f64,
    pub loss_con: f64,
    pub loss_recon: f64,
    pub valid_h10: f64,
    /// Mean `MSE(m_upd, m_ref)` on validation contexts (memory models).
    pub consistency_mse: Option<f64>,
    pub train_seconds: f64,
    pub valid_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    if dataset.users.is_empty() {
        return Err(Error::Config("dataset has no users".into()));
    }
    Ok(())
}

/// Builds the loss of one batch for the configured trainer.
fn batch_losses(
    g: &mut Graph<f32>,
    p: &BoundParams,
    seqs: &[&[u32]],
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    match cfg.trainer {
        TrainerKind::Rec2pm => rec2pm_step(g, p, seqs, &cfg.into()),
        TrainerKind::TokSerial => Ok(serial_pass(g, p, seqs, cfg.l_seg, cfg.mode)?.losses),
        TrainerKind::PlainShort => plain_pass(g, p, seqs, cfg.l_seg),
        TrainerKind::PlainFull => {
            // A full window covers every input; the last item only serves as a target.
            plain_pass(g, p, seqs, cfg.l_full.max(cfg.l_seg))
        }
    }
}

/// Mean stage-2 consistency error on validation contexts, without gradients.
pub fn consistency_mse(params: &ModelParams, dataset: &Dataset, cfg: &TrainConfig, max_users: usize) -> Result<f64> {
    let n = if max_users == 0 {
        dataset.users.len()
    } else {
        max_users.min(dataset.users.len())
    };
    let mut total = 0.0;
    let mut count = 0usize;
    let stage2 = Stage2Config {
        lambda: 1.0,
        recon_weight: 0.0,
        ..Stage2Config::from(cfg)
    };
    for chunk in dataset.users[..n].chunks(cfg.batch_size.max(1)) {
        let seqs = chunk
            .iter()
            .map(|u| training_sequence(&u.items, cfg.l_full))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::inference();
        let bp = params.bind(&mut g);
        let out = rec2pm_step(&mut g, &bp, &seqs, &stage2)?;
        let pairs = out.m_upd.len();
        total += g.value(out.con).item() as f64 * pairs as f64;
        count += pairs;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Shared epoch loop: shuffled mini-batches, AdamW, early stopping on
/// validation H@10 with the best parameters kept.
fn fit(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let mut params = ModelParams::init(cfg.model_config(dataset.catalog_size), cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            log: Vec::new(),
            best_epoch: None,
        });
    }
    let seqs = dataset
        .users
        .iter()
        .map(|u| training_sequence(&u.items, cfg.l_full))
        .collect::<Result<Vec<_>>>()?;
    let trainable = params.trainable_indices();
    let mut opt = AdamW::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut valid_opts = cfg.eval_options(Split::Valid);
    valid_opts.max_users = cfg.max_valid_users;
    let protocol = cfg.validation_protocol();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&[u32]> = idx.iter().map(|&i| seqs[i]).collect();
            let mut g = Graph::new();
            let bp = params.bind(&mut g);
            let losses = batch_losses(&mut g, &bp, &batch, cfg)?;
            let out = losses.output(&g);
            let vals = [out.loss_total, out.loss_ar, out.loss_con, out.loss_recon];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "loss_total={} loss_ar={} loss_con={} loss_recon={}",
                        vals[0], vals[1], vals[2], vals[3]
                    ),
                });
            }
            g.backward(losses.total)?;
            let vars = bp.vars();
            let grads: Vec<_> = trainable.iter().map(|&i| g.grad(vars[i])).collect();
            opt.step(params.slots_for(&trainable), &grads)?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: "non-finite parameters after optimizer step".into(),
                });
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            steps += 1;
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let report = evaluate(&params, dataset, protocol, &valid_opts)?;
        let valid_h10 = report.metric("H@10");
        let consistency = if cfg.trainer == TrainerKind::Rec2pm {
            Some(consistency_mse(&params, dataset, cfg, cfg.max_valid_users)?)
        } else {
            None
        };
        let n = steps.max(1) as f64;
        log.push(EpochLog {
            epoch,
            steps,
            loss_total: sums[0] / n,
            loss_ar: sums[1] / n,
            loss_con: sums[2] / n,
            loss_recon: sums[3] / n,
            valid_h10,
            consistency_mse: consistency,
            train_seconds,
            valid_seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _, _)| valid_h10 > *b) {
            best = Some((valid_h10, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        log,
        best_epoch: Some(best_epoch),
    })
}

fn require(cfg: &TrainConfig, kinds: &[TrainerKind], op: &str) -> Result<()> {
    if kinds.contains(&cfg.trainer) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{op} cannot run trainer {:?}",
            cfg.trainer
        )))
    }
}

pub fn train_rec2pm(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    require(cfg, &[TrainerKind::Rec2pm], "train_rec2pm")?;
    fit(dataset, cfg)
}

pub fn train_serial_baseline(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    require(cfg, &[TrainerKind::TokSerial], "train_serial_baseline")?;
    fit(dataset, cfg)
}

pub fn train_plain(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    require(
        cfg,
        &[TrainerKind::PlainShort, TrainerKind::PlainFull],
        "train_plain",
    )?;
    fit(dataset, cfg)
}

/// Dispatches on `cfg.trainer`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.trainer {
        TrainerKind::Rec2pm => train_rec2pm(dataset, cfg),
        TrainerKind::TokSerial => train_serial_baseline(dataset, cfg),
        TrainerKind::PlainShort | TrainerKind::PlainFull => train_plain(dataset, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_cross_segment_boundaries() {
        let t = segment_targets(&[vec![1, 2], vec![3, 4], vec![5]]);
        assert_eq!(t[0], vec![Some(2), Some(3)]);
        assert_eq!(t[1], vec![Some(4), Some(5)]);
        assert_eq!(t[2], vec![None]);
    }

    #[test]
    fn training_sequence_keeps_recent_items() {
        let items: Vec<u32> = (0..10).collect();
        assert_eq!(training_sequence(&items, 4).unwrap(), &[3, 4, 5, 6, 7]);
        assert_eq!(training_sequence(&items, 100).unwrap().len(), 8);
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            l_full: 20,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn short_window_instance_count() {
        let seq: Vec<u32> = (0..16).collect();
        assert_eq!(plain_instances(&seq, 4), 4);
        assert_eq!(plain_instances(&seq, 16), 1);
    }

    #[test]
    fn reference_context_shapes() {
        let mut g = Graph::<f32>::new();
        let refs: Vec<Var> = (0..4)
            .map(|h| g.constant(Tensor::filled(&[2, 3], h as f32)))
            .collect();
        let o = build_reference_context(&mut g, &refs, 3, UpdateMode::Overwrite).unwrap();
        assert_eq!(g.shape(o), &[2, 3]);
        let a = build_reference_context(&mut g, &refs, 3, UpdateMode::Append).unwrap();
        assert_eq!(g.shape(a), &[6, 3]);
        assert_eq!(g.value(a).row(0), g.value(refs[0]).row(0));
        assert!(build_reference_context(&mut g, &refs, 0, UpdateMode::Append).is_err());
        assert!(build_reference_context(&mut g, &refs, 4, UpdateMode::Append).is_err());
    }

    #[test]
    fn consistency_of_constant_offset() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::filled(&[2, 3], 1.0));
        let b = g.constant(Tensor::filled(&[2, 3], 3.0));
        let l = consistency_loss(&mut g, &[a], &[b]).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        let z = consistency_loss(&mut g, &[a], &[a]).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        assert!(consistency_loss(&mut g, &[a], &[]).is_err());
    }
}
