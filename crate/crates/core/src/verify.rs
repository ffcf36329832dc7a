//! Self-checks run by the `verify` subcommand.
//!
//! Each check is cheap and seeded. [`gradcheck`] and [`gradcheck_params`]
//! are also used directly by the test suites.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    build_causal_mask, run_layout, BoundParams, MaskKind, ModelConfig, ModelParams, SequenceLayout,
};
use crate::data::segment;
use crate::error::{Error, Result};
use crate::eval::{hit_at_k, ndcg_at_k, rank_of};
use crate::memory::{encode_memory, kv_footprint_model, token_footprint, UpdateMode};
use crate::tensor::{Graph, MaskRows, Tensor, Var};
use crate::training::{
    plain_pass, rec2pm_step, segment_batch, serial_pass, stage1_reference_pass,
    stage2_parallel_pass, Stage2Config,
};

/// Finite-difference step for whole-model losses. Their curvature makes the
/// truncation error of a `1e-3` step visible at the `1e-3` tolerance.
pub const LOSS_STEP: f64 = 1e-5;

/// Smallest magnitude used as the denominator of a relative error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error between backpropagated and central-difference
/// gradients of the scalar built by `f`, over every element of `inputs`.
///
/// Detached values are held at their unperturbed values, so the check
/// targets the same stop-gradient surrogate that backward differentiates.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.record_detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let frozen = g.take_detached();
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        g.replay_detached(frozen.clone());
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut xs = inputs.to_vec();
    let mut worst = 0f64;
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic[i].data()[j], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// [`gradcheck`] over every model parameter.
pub fn gradcheck_params<F>(params: &ModelParams<f64>, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    g.record_detached();
    let bp = params.bind(&mut g);
    let loss = f(&mut g, &bp)?;
    let frozen = g.take_detached();
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = bp
        .vars()
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        g.replay_detached(frozen.clone());
        let bp = p.bind(&mut g);
        let l = f(&mut g, &bp)?;
        Ok(g.value(l).item())
    };
    let mut p = params.clone();
    let mut worst = 0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let x0 = p.tensors_mut()[i].data()[j];
            p.tensors_mut()[i].data_mut()[j] = x0 + h;
            let up = eval(&p)?;
            p.tensors_mut()[i].data_mut()[j] = x0 - h;
            let down = eval(&p)?;
            p.tensors_mut()[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Reduces `out` to a scalar with fixed random weights so every element has
/// a distinct gradient.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(g.shape(out), 1.0, &mut rng));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A named finite-difference case: inputs and the scalar built from them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: OpFn,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// One finite-difference case per differentiable graph operation.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
    let causal = Rc::new(MaskRows::new((0..4u32).map(|i| (0..=i).collect()).collect()));
    vec![
        case("add", vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
            let o = g.add(v[0], v[1])?;
            probe(g, o, 1)
        }),
        case("sub", vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
            let o = g.sub(v[0], v[1])?;
            probe(g, o, 2)
        }),
        case("mul", vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
            let o = g.mul(v[0], v[1])?;
            probe(g, o, 3)
        }),
        case("scale", vec![r(&[2, 3])], |g, v| {
            let o = g.scale(v[0], 0.7);
            probe(g, o, 4)
        }),
        case("neg", vec![r(&[2, 3])], |g, v| {
            let o = g.neg(v[0]);
            probe(g, o, 5)
        }),
        case("add_row", vec![r(&[3, 4]), r(&[4])], |g, v| {
            let o = g.add_row(v[0], v[1])?;
            probe(g, o, 6)
        }),
        case("matmul", vec![r(&[3, 4]), r(&[4, 2])], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            probe(g, o, 7)
        }),
        case("matmul_nt", vec![r(&[3, 4]), r(&[5, 4])], |g, v| {
            let o = g.matmul_nt(v[0], v[1])?;
            probe(g, o, 8)
        }),
        case("transpose", vec![r(&[3, 4])], |g, v| {
            let o = g.transpose(v[0])?;
            probe(g, o, 9)
        }),
        case("slice_rows", vec![r(&[4, 3])], |g, v| {
            let o = g.slice_rows(v[0], 1, 3)?;
            probe(g, o, 10)
        }),
        case("concat_rows", vec![r(&[2, 3]), r(&[1, 3])], |g, v| {
            let o = g.concat_rows(&[v[0], v[1]])?;
            probe(g, o, 11)
        }),
        case("embed_sum", vec![r(&[5, 3]), r(&[2, 3])], |g, v| {
            let o = g.embed_sum(
                4,
                vec![
                    (v[0], vec![Some(1), Some(4), None, Some(1)]),
                    (v[1], vec![Some(0), None, Some(1), Some(1)]),
                ],
            )?;
            probe(g, o, 12)
        }),
        case("gelu", vec![r(&[3, 4])], |g, v| {
            let o = g.gelu(v[0]);
            probe(g, o, 13)
        }),
        case("softmax", vec![r(&[3, 4])], |g, v| {
            let o = g.softmax(v[0]);
            probe(g, o, 14)
        }),
        case("layer_norm", vec![r(&[3, 4]), r(&[4]), r(&[4])], |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, o, 15)
        }),
        case("attention", vec![r(&[4, 4]), r(&[4, 4]), r(&[4, 4])], move |g, v| {
            let o = g.attention(v[0], v[1], v[2], causal.clone(), 2)?;
            probe(g, o, 16)
        }),
        case("cross_entropy", vec![r(&[3, 5])], |g, v| {
            g.cross_entropy(v[0], &[4, 0, 2])
        }),
        case("mse", vec![r(&[2, 3]), r(&[2, 3])], |g, v| g.mse(v[0], v[1])),
        case("sum", vec![r(&[2, 3])], |g, v| {
            let s = g.sum(v[0]);
            g.mul(s, s)
        }),
        case("mean", vec![r(&[2, 3])], |g, v| {
            let s = g.mean(v[0]);
            g.mul(s, s)
        }),
        case("add_all", vec![r(&[2, 2]), r(&[2, 2]), r(&[2, 2])], |g, v| {
            let o = g.add_all(v)?;
            probe(g, o, 17)
        }),
    ]
}

/// Tiny f64 model and a batch of short multi-segment sequences.
pub fn toy_model(seed: u64) -> Result<(ModelParams<f64>, Vec<Vec<u32>>)> {
    let cfg = ModelConfig {
        n_items: 9,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        slots: 2,
        max_positions: 3,
        with_memory: true,
    };
    let params = ModelParams::<f64>::init(cfg, seed)?;
    Ok((params, vec![vec![1, 4, 2, 7, 3, 8, 0, 6], vec![5, 5, 0, 6, 2]]))
}

/// Gradient errors of the combined objective and of the baseline losses on
/// [`toy_model`]. Names paired with worst relative errors.
pub fn loss_gradchecks(seed: u64, h: f64) -> Result<Vec<(String, f64)>> {
    let (params, seqs) = toy_model(seed)?;
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let mut out = Vec::new();
    for (mode, lambda, recon) in [
        (UpdateMode::Overwrite, 1.0, 0.0),
        (UpdateMode::Overwrite, 1.0, 0.5),
        (UpdateMode::Append, 1.0, 0.0),
    ] {
        let cfg = Stage2Config {
            l_seg: 3,
            mode,
            lambda,
            recon_weight: recon,
        };
        let e = gradcheck_params(&params, h, |g, p| Ok(rec2pm_step(g, p, &refs, &cfg)?.total))?;
        out.push((format!("rec2pm {mode:?} recon={recon}").to_lowercase(), e));
    }
    let e = gradcheck_params(&params, h, |g, p| {
        Ok(serial_pass(g, p, &refs, 3, UpdateMode::Overwrite)?.losses.total)
    })?;
    out.push(("serial".into(), e));
    let e = gradcheck_params(&params, h, |g, p| Ok(plain_pass(g, p, &refs, 3)?.total))?;
    out.push(("plain".into(), e));
    Ok(out)
}

fn random_config(rng: &mut ChaCha8Rng, n_items: usize, l_seg: usize) -> ModelConfig {
    ModelConfig {
        n_items,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        slots: [1, 2, 4][rng.gen_range(0..3)],
        max_positions: l_seg,
        with_memory: true,
    }
}

/// Worst gap between reference memories from the interleaved forward and
/// per-prefix causal forwards, over `cases` random models.
pub fn stage1_equivalence(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for case in 0..cases {
        let l_seg = rng.gen_range(2..=5);
        let cfg = random_config(&mut rng, 12, l_seg);
        let params = ModelParams::<f32>::init(cfg, seed ^ (case as u64 + 1))?;
        let k = rng.gen_range(1..=4);
        let len = k * l_seg + rng.gen_range(1..=l_seg);
        let items: Vec<u32> = (0..len).map(|_| rng.gen_range(0..12)).collect();
        let segs = segment(&items, l_seg).segments;
        let mut g = Graph::inference();
        let bp = params.bind(&mut g);
        let refs = stage1_reference_pass(&mut g, &bp, &[segs.clone()])?;
        for (h, &r) in refs[0].iter().enumerate() {
            let mut layout = SequenceLayout::new();
            for (j, s) in segs[..=h].iter().enumerate() {
                layout.push_items(j, s);
            }
            layout.push_queries(h, cfg.slots);
            let direct = encode_memory(&params, &layout, None)?;
            worst = worst.max(g.value(r).max_abs_diff(&direct));
        }
    }
    Ok(worst)
}

/// Changes one future item in random causal layouts; returns whether every
/// earlier hidden row stayed bit-identical.
pub fn causality(cases: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let cfg = random_config(&mut rng, 10, 6);
        let params = ModelParams::<f32>::init(cfg, seed + case as u64)?;
        let mem_rows = rng.gen_range(0..=cfg.slots);
        let items: Vec<u32> = (0..6).map(|_| rng.gen_range(0..10)).collect();
        let memory = Tensor::<f32>::uniform(&[mem_rows, 8], 1.0, &mut rng);
        let j = rng.gen_range(0..items.len());
        let mut changed = items.clone();
        changed[j] = (changed[j] + 1) % 10;
        let hidden = |items: &[u32]| -> Result<Tensor<f32>> {
            let layout = SequenceLayout::unified(mem_rows, items, cfg.slots);
            let mut g = Graph::inference();
            let bp = params.bind(&mut g);
            let m = (mem_rows > 0).then(|| g.constant(memory.clone()));
            let fwd = run_layout(&mut g, &bp, &layout, m, MaskKind::Causal)?;
            Ok(g.value(fwd.hidden).clone())
        };
        let (a, b) = (hidden(&items)?, hidden(&changed)?);
        let cut = mem_rows + j;
        if a.data()[..cut * 8] != b.data()[..cut * 8] {
            return Ok(false);
        }
        debug_assert_eq!(build_causal_mask(&SequenceLayout::plain(&items)).size(), 6);
    }
    Ok(true)
}

/// Gaps of the stage-2 pass: batched vs one user at a time (updated
/// memories), and original vs reversed instance order (losses).
pub fn stage2_batching(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng, 15, 4);
    let params = ModelParams::<f32>::init(cfg, seed)?;
    let seqs: Vec<Vec<u32>> = [13, 9, 16]
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(0..15)).collect())
        .collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let s2 = Stage2Config {
        l_seg: 4,
        mode: UpdateMode::Overwrite,
        lambda: 1.0,
        recon_weight: 0.0,
    };
    let run = |batch: &[Vec<Vec<u32>>], order: Option<&[usize]>| -> Result<(Vec<Tensor<f32>>, [f64; 3])> {
        let mut g = Graph::inference();
        let bp = params.bind(&mut g);
        let m_refs = stage1_reference_pass(&mut g, &bp, batch)?;
        let out = stage2_parallel_pass(&mut g, &bp, batch, &m_refs, &s2, order)?.output(&g);
        Ok((out.m_upd, [out.loss_total, out.loss_ar, out.loss_con]))
    };
    let batch = segment_batch(&refs, 4);
    let (together, losses) = run(&batch, None)?;
    let mut separate = Vec::new();
    for b in &batch {
        separate.extend(run(std::slice::from_ref(b), None)?.0);
    }
    if together.len() != separate.len() {
        return Err(Error::Config("batched pass lost an instance".into()));
    }
    let batch_gap = together
        .iter()
        .zip(&separate)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    let n = together_instances(&batch, 4);
    let reversed: Vec<usize> = (0..n).rev().collect();
    let (_, permuted) = run(&batch, Some(&reversed))?;
    let order_gap = losses
        .iter()
        .zip(&permuted)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((batch_gap, order_gap))
}

fn together_instances(batch: &[Vec<Vec<u32>>], l_seg: usize) -> usize {
    batch
        .iter()
        .map(|segs| {
            let t = crate::training::segment_targets(segs);
            (0..segs.len())
                .filter(|&h| segs[h].len() == l_seg || t[h].iter().any(Option::is_some))
                .count()
        })
        .sum()
}

/// Rank of `target` by sorting the whole catalog (descending score, then
/// ascending id) and searching the list.
pub fn sorted_rank(scores: &[f32], target: u32) -> usize {
    let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    ids.iter().position(|&i| i == target).expect("target in catalog") + 1
}

/// Number of random small-catalog cases where rank, hit and NDCG disagree
/// with the sort-and-search oracle.
pub fn metric_oracle(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=8);
        // Few distinct values so ties are common.
        let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..4) as f32 * 0.5).collect();
        let target = rng.gen_range(0..n as u32);
        let rank = rank_of(&scores, target);
        let oracle = sorted_rank(&scores, target);
        let k = rng.gen_range(1..=8);
        let hit = if oracle <= k { 1.0 } else { 0.0 };
        let ndcg = if oracle <= k {
            1.0 / ((oracle + 1) as f64).log2()
        } else {
            0.0
        };
        if rank != oracle || hit_at_k(rank, k) != hit || (ndcg_at_k(rank, k) - ndcg).abs() > 1e-12 {
            bad += 1;
        }
    }
    bad
}

/// Outcome of one self-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs every self-check.
pub fn run_suite(seed: u64) -> Vec<Check> {
    let mut out = vec![timed("stage1-equivalence", || {
        let d = stage1_equivalence(50, seed)?;
        Ok((d < 1e-5, format!("max abs diff {d:.3e} over 50 models")))
    })];
    for c in op_cases(seed) {
        out.push(timed(&format!("gradcheck {}", c.name), || {
            let e = gradcheck(&c.inputs, 1e-3, c.build)?;
            Ok((e < 1e-3, format!("max rel err {e:.3e}")))
        }));
    }
    out.push(timed("gradcheck losses", || {
        let errs = loss_gradchecks(seed, LOSS_STEP)?;
        let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        let detail = errs
            .iter()
            .map(|(n, e)| format!("{n}: {e:.2e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((worst < 1e-3, detail))
    }));
    out.push(timed("causality", || {
        let ok = causality(20, seed)?;
        Ok((ok, if ok { "earlier rows bit-identical".into() } else { "earlier row changed".into() }))
    }));
    out.push(timed("stage2-batching", || {
        let (b, o) = stage2_batching(seed)?;
        Ok((b < 1e-6 && o < 1e-6, format!("batched gap {b:.2e}, order gap {o:.2e}")))
    }));
    out.push(timed("metric-oracle", || {
        let bad = metric_oracle(1000, seed);
        Ok((bad == 0, format!("{bad} of 1000 cases disagree")))
    }));
    out.push(timed("storage-arithmetic", || {
        let got = [
            token_footprint(4, 64, 1, UpdateMode::Overwrite),
            token_footprint(4, 64, 4, UpdateMode::Append),
            kv_footprint_model(4, 64, 16, 1, UpdateMode::Overwrite),
            kv_footprint_model(4, 64, 16, 4, UpdateMode::Append),
        ];
        Ok((got == [1024, 4096, 32768, 131072], format!("{got:?} bytes")))
    }));
    out
}
