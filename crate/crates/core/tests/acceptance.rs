//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line
//! straight to stdout (bypassing capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec2pm::backbone::ModelParams;
use rec2pm::data::{generate_synthetic, Dataset, SyntheticSpec};
use rec2pm::eval::{evaluate, EvalProtocol, Split};
use rec2pm::inference::{bench, BenchTarget};
use rec2pm::memory::{init_memory, kv_footprint_model, token_footprint, update_memory, UpdateMode};
use rec2pm::training::{consistency_mse, train, TrainConfig, TrainerKind};
use rec2pm::verify::{causality, gradcheck, loss_gradchecks, metric_oracle, op_cases, stage1_equivalence, stage2_batching, LOSS_STEP};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn line(n: u32, name: &str, passed: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {n:>2} {} {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = out.flush();
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn dataset() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| generate_synthetic(&SyntheticSpec::default()).unwrap())
}

fn base_config() -> TrainConfig {
    TrainConfig {
        max_valid_users: 500,
        ..TrainConfig::default()
    }
}

struct Trained {
    cfg: TrainConfig,
    params: ModelParams,
    seconds: f64,
}

fn train_seeds(cfg: TrainConfig, seeds: &[u64]) -> Vec<Trained> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let t = Instant::now();
            let params = train(dataset(), &cfg).unwrap().params;
            Trained {
                cfg,
                params,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn lambda_one() -> &'static [Trained] {
    static M: OnceLock<Vec<Trained>> = OnceLock::new();
    M.get_or_init(|| train_seeds(base_config(), &SEEDS))
}

fn lambda_zero() -> &'static [Trained] {
    static M: OnceLock<Vec<Trained>> = OnceLock::new();
    M.get_or_init(|| {
        train_seeds(
            TrainConfig {
                lambda: 0.0,
                ..base_config()
            },
            &SEEDS,
        )
    })
}

fn with_recon() -> &'static [Trained] {
    static M: OnceLock<Vec<Trained>> = OnceLock::new();
    M.get_or_init(|| {
        train_seeds(
            TrainConfig {
                recon_weight: 1.0,
                ..base_config()
            },
            &SEEDS,
        )
    })
}

fn short() -> &'static [Trained] {
    static M: OnceLock<Vec<Trained>> = OnceLock::new();
    M.get_or_init(|| {
        train_seeds(
            TrainConfig {
                trainer: TrainerKind::PlainShort,
                ..base_config()
            },
            &SEEDS,
        )
    })
}

fn h10(m: &Trained, protocol: EvalProtocol) -> f64 {
    evaluate(&m.params, dataset(), protocol, &m.cfg.eval_options(Split::Test))
        .unwrap()
        .metric("H@10")
}

fn h10s(models: &[Trained], protocol: EvalProtocol) -> Vec<f64> {
    models.iter().map(|m| h10(m, protocol)).collect()
}

#[test]
fn criterion_01_stage1_equivalence() {
    let t = Instant::now();
    let worst = stage1_equivalence(50, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    line(
        1,
        "stage-1 equivalence",
        worst < 1e-5 && secs < 30.0,
        &format!("max abs diff {worst:.2e} (< 1e-5) over 50 models in {secs:.2}s (< 30s)"),
    );
}

#[test]
fn criterion_02_gradient_correctness() {
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut names = Vec::new();
    for seed in 0..3 {
        for case in op_cases(seed) {
            let e = gradcheck(&case.inputs, 1e-3, case.build).unwrap();
            if e >= worst.1 {
                worst = (case.name, e);
            }
            names.push(case.name);
        }
    }
    let losses = loss_gradchecks(0, LOSS_STEP).unwrap();
    let loss_worst = losses.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    names.dedup();
    line(
        2,
        "gradient correctness",
        worst.1 < 1e-3 && loss_worst < 1e-3 && secs < 60.0,
        &format!(
            "{} ops, worst op {} {:.2e}; combined objective and baselines worst {loss_worst:.2e} (< 1e-3) in {secs:.1}s (< 60s)",
            names.len(),
            worst.0,
            worst.1
        ),
    );
}

#[test]
fn criterion_03_causality_and_parallelism() {
    let causal = causality(50, 3).unwrap();
    let (mut batch, mut order) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let (b, o) = stage2_batching(seed).unwrap();
        batch = batch.max(b);
        order = order.max(o);
    }
    line(
        3,
        "causality and parallelism",
        causal && batch < 1e-6 && order < 1e-6,
        &format!(
            "future perturbation bit-identical: {causal}; batched vs sequential {batch:.2e}, permuted order {order:.2e} (< 1e-6)"
        ),
    );
}

#[test]
fn criterion_04_storage_arithmetic() {
    let got = [
        token_footprint(4, 64, 1, UpdateMode::Overwrite),
        token_footprint(4, 64, 4, UpdateMode::Append),
        kv_footprint_model(4, 64, 16, 1, UpdateMode::Overwrite),
        kv_footprint_model(4, 64, 16, 4, UpdateMode::Append),
    ];
    line(
        4,
        "storage arithmetic",
        got == [1024, 4096, 32 * 1024, 128 * 1024],
        &format!("O {} B, A(4) {} B, KV 16 layers {} B / {} B", got[0], got[1], got[2], got[3]),
    );
}

#[test]
fn criterion_05_iterative_vs_oneoff() {
    let models = lambda_one();
    let t = Instant::now();
    let it = h10s(models, EvalProtocol::MemIterative);
    let one = h10s(models, EvalProtocol::MemOneoff);
    let total = models.iter().map(|m| m.seconds).sum::<f64>() + t.elapsed().as_secs_f64();
    let gap = (mean(&it) - mean(&one)).abs();
    line(
        5,
        "iterative vs one-off",
        gap <= 1.0 && total < 900.0,
        &format!(
            "H@10 iterative {:.2}, one-off {:.2}, |diff| {gap:.2} (<= 1.0) over seeds 0-4; {total:.0}s (< 900s)",
            mean(&it),
            mean(&one)
        ),
    );
}

#[test]
fn criterion_06_consistency_ablation() {
    let one = lambda_one();
    let zero = lambda_zero();
    let mse = |ms: &[Trained]| -> f64 {
        mean(&ms.iter().map(|m| consistency_mse(&m.params, dataset(), &m.cfg, 0).unwrap()).collect::<Vec<_>>())
    };
    let (mse1, mse0) = (mse(one), mse(zero));
    let (h1, h0) = (mean(&h10s(one, EvalProtocol::MemIterative)), mean(&h10s(zero, EvalProtocol::MemIterative)));
    line(
        6,
        "consistency-loss ablation",
        mse0 >= 5.0 * mse1 && h0 < h1,
        &format!(
            "MSE lambda=0 {mse0:.3e} vs lambda=1 {mse1:.3e} (ratio {:.1}, >= 5); H@10 lambda=0 {h0:.2} < lambda=1 {h1:.2}",
            mse0 / mse1
        ),
    );
}

#[test]
fn criterion_07_memory_beats_short() {
    let mem = mean(&h10s(lambda_one(), EvalProtocol::MemIterative));
    let s = mean(&h10s(short(), EvalProtocol::Short));
    line(
        7,
        "long-term signal",
        mem - s >= 2.0,
        &format!("H@10 Rec2PM-O {mem:.2} vs Short {s:.2}, margin {:.2} (>= 2.0)", mem - s),
    );
}

#[test]
fn criterion_08_append_vs_overwrite() {
    let p = &lambda_one()[0].params;
    let d = dataset();
    let append = train_seeds(
        TrainConfig {
            mode: UpdateMode::Append,
            ..base_config()
        },
        &[0],
    );
    let h_o = h10(&lambda_one()[0], EvalProtocol::MemIterative);
    let h_a = h10(&append[0], EvalProtocol::MemIterative);
    let l_seg = p.config.max_positions;
    let items = &d.users[0].items;
    let mut sizes = Vec::new();
    for (mode, params) in [(UpdateMode::Overwrite, p), (UpdateMode::Append, &append[0].params)] {
        let mut m = init_memory(params, &items[..l_seg], mode).unwrap();
        let mut s = vec![m.file_bytes()];
        for seg in items[l_seg..].chunks_exact(l_seg) {
            m = update_memory(params, &m, seg).unwrap();
            s.push(m.file_bytes());
        }
        sizes.push(s);
    }
    let constant = sizes[0].windows(2).all(|w| w[0] == w[1]);
    let step = sizes[1][1] - sizes[1][0];
    let linear = sizes[1].windows(2).all(|w| w[1] - w[0] == step) && step == p.config.slots * p.config.d_model * 4;
    line(
        8,
        "appending vs overwriting",
        constant && linear && h_o.is_finite() && h_a.is_finite(),
        &format!("H@10 overwrite {h_o:.2}, append {h_a:.2} (seed 0); file bytes overwrite {:?}, append {:?}", sizes[0], sizes[1]),
    );
}

#[test]
fn criterion_09_latency() {
    let cfg = TrainConfig::default();
    let n_items = SyntheticSpec::default().catalog_size;
    let len = 16 * cfg.l_seg;
    let memory = ModelParams::init(cfg.model_config(n_items), 0).unwrap();
    let full_cfg = TrainConfig {
        trainer: TrainerKind::PlainFull,
        l_full: len,
        ..cfg.clone()
    };
    let full = ModelParams::init(full_cfg.model_config(n_items), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let contexts: Vec<Vec<u32>> = (0..8)
        .map(|_| (0..len).map(|_| rng.gen_range(0..n_items as u32)).collect())
        .collect();
    let refs: Vec<&[u32]> = contexts.iter().map(Vec::as_slice).collect();
    let r = bench(&[BenchTarget::Full(&full), BenchTarget::Memory(&memory, UpdateMode::Overwrite)], &refs, 5).unwrap();
    let ratio = r[1].predict_median_ms / r[0].predict_median_ms;
    line(
        9,
        "efficiency direction",
        ratio < 0.5,
        &format!(
            "median predict at {len} items: memory {:.3} ms, full {:.3} ms, ratio {ratio:.3} (< 0.5)",
            r[1].predict_median_ms, r[0].predict_median_ms
        ),
    );
}

#[test]
fn criterion_10_metric_oracle() {
    let bad = metric_oracle(1000, 10);
    line(10, "metric oracle", bad == 0, &format!("{bad} of 1000 cases disagree (exact)"));
}

#[test]
fn criterion_11_overlap_robustness() {
    let models = lambda_one();
    let plain = mean(&h10s(models, EvalProtocol::MemIterative));
    let shifted = mean(&h10s(models, EvalProtocol::MemOverlap));
    let overlap = models[0].cfg.l_seg / 4;
    line(
        11,
        "overlap robustness",
        (plain - shifted).abs() <= 2.0,
        &format!("H@10 no overlap {plain:.2}, overlap {overlap} {shifted:.2}, |diff| {:.2} (<= 2.0)", (plain - shifted).abs()),
    );
}

#[test]
fn criterion_12_reconstruction_ablation() {
    let implicit = h10s(lambda_one(), EvalProtocol::MemIterative);
    let recon = h10s(with_recon(), EvalProtocol::MemIterative);
    let diffs: Vec<f64> = recon.iter().zip(&implicit).map(|(r, i)| r - i).collect();
    let d = mean(&diffs);
    let sd = (diffs.iter().map(|x| (x - d).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    let noise = (2.0 * sd / (diffs.len() as f64).sqrt()).max(1.0);
    line(
        12,
        "reconstruction ablation",
        d <= noise,
        &format!(
            "H@10 recon {:.2} vs implicit {:.2}, paired gain {d:.2} (<= noise {noise:.2}: max(2 SE, 1.0))",
            mean(&recon),
            mean(&implicit)
        ),
    );
}
