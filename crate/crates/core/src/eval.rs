//! Ranking metrics, evaluation protocols, ablation runs and attention export.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{run_layout, MaskKind, ModelParams, Role, SequenceLayout};
use crate::data::{split_leave_one_out, Dataset};
use crate::error::{Error, Result};
use crate::inference::{decode_scores, oneoff_compress};
use crate::memory::{init_memory, update_memory, MemoryState, UpdateMode};
use crate::tensor::Graph;
use crate::training::{consistency_mse, train, TrainConfig, TrainerKind};

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target` when items are sorted by descending score with
/// ties broken by ascending id.
pub fn rank_of(scores: &[f32], target: u32) -> usize {
    let t = target as usize;
    let s = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < t))
        .count()
}

/// Metric names in report order, with their cutoffs.
pub const METRICS: [(&str, usize); 5] = [
    ("H@1", 1),
    ("H@10", 10),
    ("H@50", 50),
    ("N@10", 10),
    ("N@50", 50),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalProtocol {
    /// Plain model on the last `L_seg` items.
    Short,
    /// Plain model on the last `L_full` items.
    Full,
    /// Memory updated segment by segment, last segment raw.
    MemIterative,
    /// Archived segments compressed in a single interleaved forward.
    MemOneoff,
    /// Iterative memory whose coverage is shifted into the recent window.
    MemOverlap,
}

impl EvalProtocol {
    pub const ALL: [Self; 5] = [
        Self::Short,
        Self::Full,
        Self::MemIterative,
        Self::MemOneoff,
        Self::MemOverlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Full => "full",
            Self::MemIterative => "mem-iterative",
            Self::MemOneoff => "mem-oneoff",
            Self::MemOverlap => "mem-overlap",
        }
    }

    pub fn needs_memory(self) -> bool {
        matches!(self, Self::MemIterative | Self::MemOneoff | Self::MemOverlap)
    }
}

impl FromStr for EvalProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol `{s}`")))
    }
}

/// Which held-out item is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        crate::error::parse_variant("split", s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub l_seg: usize,
    pub l_full: usize,
    pub mode: UpdateMode,
    /// Shift used by [`EvalProtocol::MemOverlap`].
    pub overlap: usize,
    pub split: Split,
    /// Users scored; 0 means all.
    pub max_users: usize,
}

/// Mean metrics in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub n_users: usize,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }

    /// Arithmetic mean of per-seed reports.
    pub fn average(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Config("no reports to average".into()))?;
        if reports
            .iter()
            .any(|r| r.protocol != first.protocol || r.metrics.len() != first.metrics.len())
        {
            return Err(Error::Config("reports differ in protocol or metrics".into()));
        }
        let n = reports.len() as f64;
        let metrics = first
            .metrics
            .keys()
            .map(|k| {
                let s: f64 = reports.iter().map(|r| r.metric(k)).sum();
                (k.clone(), s / n)
            })
            .collect();
        Ok(EvalReport {
            protocol: first.protocol.clone(),
            n_users: first.n_users,
            seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
            metrics,
        })
    }

    /// Range, monotonicity in K, and N@K ≤ H@K.
    pub fn check_invariants(&self) -> Result<()> {
        let tol = 1e-9;
        for (k, &v) in &self.metrics {
            if !(-tol..=100.0 + tol).contains(&v) {
                return Err(Error::Config(format!("{k} = {v} is outside [0, 100]")));
            }
        }
        let m = |k: &str| self.metric(k);
        let ok = m("H@1") <= m("H@10") + tol
            && m("H@10") <= m("H@50") + tol
            && m("N@10") <= m("H@10") + tol
            && m("N@50") <= m("H@50") + tol
            && m("N@10") <= m("N@50") + tol;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("metric ordering violated: {:?}", self.metrics)))
        }
    }
}

/// Accumulates per-user ranks into an [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sums: [f64; 5],
    n: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, rank: usize) {
        for (s, (name, k)) in self.sums.iter_mut().zip(METRICS) {
            *s += if name.starts_with('H') {
                hit_at_k(rank, k)
            } else {
                ndcg_at_k(rank, k)
            };
        }
        self.n += 1;
    }

    pub fn report(&self, protocol: &str, seeds: Vec<u64>) -> EvalReport {
        let n = self.n.max(1) as f64;
        EvalReport {
            protocol: protocol.to_string(),
            n_users: self.n,
            seeds,
            metrics: METRICS
                .iter()
                .zip(self.sums)
                .map(|(&(name, _), s)| (name.to_string(), 100.0 * s / n))
                .collect(),
        }
    }
}

/// History preceding the held-out item (at most `l_full` items) and the item.
pub fn eval_context(items: &[u32], split: Split, l_full: usize) -> Result<(&[u32], u32)> {
    let (train, valid, test) = split_leave_one_out(items)?;
    let (hist, target) = match split {
        Split::Valid => (train, valid),
        Split::Test => (&items[..items.len() - 1], test),
    };
    Ok((&hist[hist.len().saturating_sub(l_full)..], target))
}

/// Iterative memory over consecutive full segments of `items`.
pub fn iterative_memory(params: &ModelParams, items: &[u32], l_seg: usize, mode: UpdateMode) -> Result<Option<MemoryState>> {
    let mut state: Option<MemoryState> = None;
    for seg in items.chunks(l_seg) {
        state = Some(match &state {
            None => init_memory(params, seg, mode)?,
            Some(m) => update_memory(params, m, seg)?,
        });
    }
    Ok(state)
}

fn check_protocol(params: &ModelParams, protocol: EvalProtocol, opts: &EvalOptions) -> Result<()> {
    let cfg = &params.config;
    let mismatch = || Error::ProtocolMismatch {
        protocol: protocol.name().to_string(),
        kind: if cfg.with_memory {
            format!("memory model with {} positions", cfg.max_positions)
        } else {
            format!("plain model with {} positions", cfg.max_positions)
        },
    };
    let ok = match protocol {
        EvalProtocol::Short => cfg.max_positions >= opts.l_seg,
        EvalProtocol::Full => !cfg.with_memory && cfg.max_positions >= opts.l_full,
        _ => cfg.with_memory && cfg.max_positions == opts.l_seg,
    };
    if !ok {
        return Err(mismatch());
    }
    if protocol == EvalProtocol::MemOverlap && opts.overlap >= opts.l_seg {
        return Err(Error::Config(format!(
            "overlap {} must be smaller than l_seg {}",
            opts.overlap, opts.l_seg
        )));
    }
    Ok(())
}

/// Catalog scores for one context under `protocol`.
pub fn context_scores(
    params: &ModelParams,
    ctx: &[u32],
    protocol: EvalProtocol,
    opts: &EvalOptions,
) -> Result<Vec<f32>> {
    let l_seg = opts.l_seg;
    if ctx.is_empty() {
        return Err(Error::EmptySession);
    }
    // The last (possibly partial) segment stays raw.
    let recent = (ctx.len() - 1) % l_seg + 1;
    let archived = ctx.len() - recent;
    let memory = match protocol {
        EvalProtocol::Short => {
            return decode_scores(params, None, &ctx[ctx.len().saturating_sub(l_seg)..])
        }
        EvalProtocol::Full => return decode_scores(params, None, ctx),
        EvalProtocol::MemIterative => iterative_memory(params, &ctx[..archived], l_seg, opts.mode)?,
        EvalProtocol::MemOneoff => {
            if archived == 0 {
                None
            } else {
                Some(oneoff_compress(&ctx[..archived], params, opts.mode)?)
            }
        }
        EvalProtocol::MemOverlap => {
            let shift = opts.overlap.min(recent);
            iterative_memory(params, &ctx[shift..archived + shift], l_seg, opts.mode)?
        }
    };
    decode_scores(params, memory.as_ref().map(|m| &m.content), &ctx[archived..])
}

/// Ranks the held-out item of every user and averages the metrics.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    protocol: EvalProtocol,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_protocol(params, protocol, opts)?;
    let n = if opts.max_users == 0 {
        dataset.users.len()
    } else {
        opts.max_users.min(dataset.users.len())
    };
    let mut acc = MetricAccumulator::default();
    for u in &dataset.users[..n] {
        let (ctx, target) = eval_context(&u.items, opts.split, opts.l_full)?;
        let scores = context_scores(params, ctx, protocol, opts)?;
        acc.push(rank_of(&scores, target));
    }
    Ok(acc.report(protocol.name(), Vec::new()))
}

/// How attended keys are labelled in the export.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionTarget {
    /// One row per attended slot (memory row, item position, query slot).
    Position,
    /// Item positions summed by category.
    Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub slot: usize,
    pub target: String,
    pub weight: f64,
    pub kind: String,
    /// Set for per-layer exports.
    pub layer: Option<usize>,
}

/// Memory before the last update of `items` and the segment that update
/// absorbs. `None` if `items` holds no full segment.
pub fn final_update_inputs(
    params: &ModelParams,
    items: &[u32],
    mode: UpdateMode,
) -> Result<Option<(Option<MemoryState>, Vec<u32>)>> {
    let l_seg = params.config.max_positions;
    let full = items.len() / l_seg;
    if full == 0 {
        return Ok(None);
    }
    let prior = iterative_memory(params, &items[..(full - 1) * l_seg], l_seg, mode)?;
    Ok(Some((prior, items[(full - 1) * l_seg..full * l_seg].to_vec())))
}

/// Attention of each memory query in the update `[memory; segment; Q_mem]`,
/// averaged over heads and layers, or one block per layer.
pub fn export_attention(
    params: &ModelParams,
    memory: Option<&MemoryState>,
    segment: &[u32],
    target: AttentionTarget,
    categories: Option<&HashMap<u32, u32>>,
    per_layer: bool,
) -> Result<Vec<AttentionRow>> {
    let c = params.config.slots;
    let rows = memory.map_or(0, MemoryState::rows);
    let layout = SequenceLayout::unified(rows, segment, c);
    let mut g = Graph::inference();
    let bp = params.bind(&mut g);
    let mem = memory.map(|m| g.constant(m.content.clone()));
    let fwd = run_layout(&mut g, &bp, &layout, mem, MaskKind::Causal)?;
    let t = layout.len();
    let q0 = layout.trailing_query_block(c)?;
    let per: Vec<Vec<f32>> = fwd
        .attention
        .iter()
        .map(|&a| {
            g.attention_probs(a)
                .expect("attention node")
                .mean_over_heads()
        })
        .collect();
    let blocks: Vec<(Option<usize>, Vec<f64>)> = if per_layer {
        per.iter()
            .enumerate()
            .map(|(l, m)| (Some(l), m.iter().map(|&x| x as f64).collect()))
            .collect()
    } else {
        let n = per.len() as f64;
        let mut acc = vec![0.0f64; t * t];
        for m in &per {
            for (a, &x) in acc.iter_mut().zip(m) {
                *a += x as f64 / n;
            }
        }
        vec![(None, acc)]
    };
    let slots = layout.slots();
    let mut out = Vec::new();
    for (layer, dense) in &blocks {
        for cq in 0..c {
            let i = q0 + cq;
            let mut by_cat: BTreeMap<u32, f64> = BTreeMap::new();
            for j in 0..=i {
                let w = dense[i * t + j];
                let s = &slots[j];
                let (label, kind) = match s.role {
                    Role::Memory => (format!("m{}", s.within), "memory"),
                    Role::Query => (format!("q{}", s.within), "query"),
                    Role::Item => {
                        if target == AttentionTarget::Category {
                            let item = s.item.expect("item slot");
                            let cat = categories
                                .and_then(|m| m.get(&item).copied())
                                .ok_or_else(|| {
                                    Error::Config(format!("no category known for item {item}"))
                                })?;
                            *by_cat.entry(cat).or_default() += w;
                            continue;
                        }
                        (s.within.to_string(), "item")
                    }
                };
                out.push(AttentionRow {
                    slot: cq,
                    target: label,
                    weight: w,
                    kind: kind.into(),
                    layer: *layer,
                });
            }
            for (cat, w) in by_cat {
                out.push(AttentionRow {
                    slot: cq,
                    target: cat.to_string(),
                    weight: w,
                    kind: "category".into(),
                    layer: *layer,
                });
            }
        }
    }
    Ok(out)
}

/// CSV with header `slot,target,weight,kind` (plus `layer` when present).
pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let per_layer = rows.iter().any(|r| r.layer.is_some());
    let mut s = String::from(if per_layer {
        "slot,target,weight,kind,layer\n"
    } else {
        "slot,target,weight,kind\n"
    });
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.slot, r.target, r.weight, r.kind);
        if let Some(l) = r.layer {
            let _ = write!(s, ",{l}");
        }
        s.push('\n');
    }
    s
}

/// Variants covered by [`run_ablation_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationPlan {
    pub seeds: Vec<u64>,
    pub slot_values: Vec<usize>,
    pub recon_weight: f64,
    pub protocol_users: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            slot_values: vec![1, 2, 4, 8, 16],
            recon_weight: 1.0,
            protocol_users: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub lambda: f64,
    pub slots: usize,
    pub recon_weight: f64,
    pub overlap: usize,
    pub report: EvalReport,
    pub consistency_mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

struct Variant {
    cfg: TrainConfig,
    protocols: Vec<(String, EvalProtocol, usize)>,
}

/// Trains and evaluates the λ pair, the slot sweep, the reconstruction
/// variant and the overlap variant, each averaged over `plan.seeds`.
pub fn run_ablation_suite(dataset: &Dataset, base: &TrainConfig, plan: &AblationPlan) -> Result<AblationTable> {
    let base = TrainConfig {
        trainer: TrainerKind::Rec2pm,
        ..base.clone()
    };
    let quarter = base.l_seg / 4;
    let mut variants = vec![
        Variant {
            cfg: TrainConfig {
                lambda: 1.0,
                recon_weight: 0.0,
                ..base.clone()
            },
            protocols: vec![
                ("lambda=1".into(), EvalProtocol::MemIterative, 0),
                (format!("overlap={quarter}"), EvalProtocol::MemOverlap, quarter),
            ],
        },
        Variant {
            cfg: TrainConfig {
                lambda: 0.0,
                recon_weight: 0.0,
                ..base.clone()
            },
            protocols: vec![("lambda=0".into(), EvalProtocol::MemIterative, 0)],
        },
        Variant {
            cfg: TrainConfig {
                lambda: 1.0,
                recon_weight: plan.recon_weight,
                ..base.clone()
            },
            protocols: vec![(format!("recon={}", plan.recon_weight), EvalProtocol::MemIterative, 0)],
        },
    ];
    for &c in &plan.slot_values {
        variants.push(Variant {
            cfg: TrainConfig {
                slots: c,
                lambda: 1.0,
                recon_weight: 0.0,
                ..base.clone()
            },
            protocols: vec![(format!("slots={c}"), EvalProtocol::MemIterative, 0)],
        });
    }
    let mut table = AblationTable::default();
    for v in variants {
        let mut reports: Vec<Vec<EvalReport>> = vec![Vec::new(); v.protocols.len()];
        let mut mses = Vec::new();
        for &seed in &plan.seeds {
            let cfg = TrainConfig { seed, ..v.cfg.clone() };
            let trained = train(dataset, &cfg)?;
            mses.push(consistency_mse(&trained.params, dataset, &cfg, plan.protocol_users)?);
            for (i, (_, protocol, overlap)) in v.protocols.iter().enumerate() {
                let opts = EvalOptions {
                    overlap: *overlap,
                    max_users: plan.protocol_users,
                    ..cfg.eval_options(Split::Test)
                };
                let mut r = evaluate(&trained.params, dataset, *protocol, &opts)?;
                r.seeds = vec![seed];
                reports[i].push(r);
            }
        }
        let mse = (!mses.is_empty()).then(|| mses.iter().sum::<f64>() / mses.len() as f64);
        for ((name, _, overlap), reps) in v.protocols.iter().zip(reports) {
            if reps.is_empty() {
                continue;
            }
            table.rows.push(AblationRow {
                name: name.clone(),
                lambda: v.cfg.lambda,
                slots: v.cfg.slots,
                recon_weight: v.cfg.recon_weight,
                overlap: *overlap,
                report: EvalReport::average(&reps)?,
                consistency_mse: mse,
            });
        }
    }
    Ok(table)
}

/// Row sums of exported weights per `(layer, slot)`.
pub fn attention_row_sums(rows: &[AttentionRow]) -> BTreeMap<(Option<usize>, usize), f64> {
    let mut out = BTreeMap::new();
    for r in rows {
        *out.entry((r.layer, r.slot)).or_insert(0.0) += r.weight;
    }
    out
}

/// Uniform-score ranking convenience for baselines.
pub fn uniform_scores(n_items: usize) -> Vec<f32> {
    vec![0.0; n_items]
}
