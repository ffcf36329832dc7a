use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec2pm::backbone::{build_causal_mask, ModelParams, SequenceLayout};
use rec2pm::memory::{encode_memory, init_memory, UpdateMode};
use rec2pm::tensor::{Graph, Tensor};
use rec2pm::training::*;
use rec2pm::verify::stage2_batching;

mod common;
use common::{config, reference_ce, reference_hidden, small_dataset};

fn stage2(l_seg: usize, mode: UpdateMode, lambda: f64, recon_weight: f64) -> Stage2Config {
    Stage2Config {
        l_seg,
        mode,
        lambda,
        recon_weight,
    }
}

fn random_seqs(rng: &mut impl Rng, users: usize, n_items: u32, max_len: usize) -> Vec<Vec<u32>> {
    (0..users)
        .map(|_| (0..rng.gen_range(2..=max_len)).map(|_| rng.gen_range(0..n_items)).collect())
        .collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        l_seg: 4,
        l_full: 16,
        d_model: 16,
        slots: 2,
        batch_size: 8,
        epochs: 3,
        early_stop_patience: 100,
        lr: 3e-3,
        max_valid_users: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn first_reference_equals_initial_memory() {
    let p = ModelParams::<f32>::init(config(20, 8, 2, 2, 3, 4), 1).unwrap();
    let segs = vec![vec![1u32, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10]];
    let mut g = Graph::<f32>::inference();
    let bp = p.bind(&mut g);
    let refs = stage1_reference_pass(&mut g, &bp, std::slice::from_ref(&segs)).unwrap();
    assert_eq!(refs[0].len(), segs.len());
    let m0 = init_memory(&p, &segs[0], UpdateMode::Overwrite).unwrap();
    assert!(g.value(refs[0][0]).max_abs_diff(&m0.content) < 1e-5);
    for h in 0..segs.len() {
        let mut prefix = SequenceLayout::new();
        for (k, s) in segs[..=h].iter().enumerate() {
            prefix.push_items(k, s);
        }
        prefix.push_queries(h, 3);
        let oneoff = encode_memory(&p, &prefix, None).unwrap();
        assert!(g.value(refs[0][h]).max_abs_diff(&oneoff) < 1e-5, "segment {h}");
    }
}

#[test]
fn reference_context_per_mode() {
    let mut g = Graph::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let refs: Vec<_> = (0..4).map(|_| g.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng))).collect();
    for h in 1..4 {
        let o = build_reference_context(&mut g, &refs, h, UpdateMode::Overwrite).unwrap();
        assert_eq!(g.value(o).rows(), 2);
    }
    let a = build_reference_context(&mut g, &refs, 3, UpdateMode::Append).unwrap();
    assert_eq!(g.value(a).rows(), 6);
    let block0 = g.value(a).slice_rows(0, 2).unwrap();
    assert_eq!(&block0, g.value(refs[0]));
    let block2 = g.value(a).slice_rows(4, 6).unwrap();
    assert_eq!(&block2, g.value(refs[2]));
    assert!(build_reference_context(&mut g, &refs, 0, UpdateMode::Append).is_err());
}

#[test]
fn consistency_closed_forms() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = g.param(Tensor::uniform(&[2, 3], 1.0, &mut rng));
    let same = consistency_loss(&mut g, &[a], &[a]).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    let shifted: Vec<f64> = g.value(a).data().iter().map(|x| x + 2.0).collect();
    let b = g.constant(Tensor::new(vec![2, 3], shifted).unwrap());
    let four = consistency_loss(&mut g, &[a], &[b]).unwrap();
    assert!((g.value(four).item() - 4.0).abs() < 1e-12);
    let empty = consistency_loss(&mut g, &[], &[]).unwrap();
    assert_eq!(g.value(empty).item(), 0.0);
}

#[test]
fn consistency_gradient_skips_references() {
    let mut g = Graph::<f64>::new();
    let r = g.param(Tensor::filled(&[1, 2], 1.0));
    let u = g.param(Tensor::filled(&[1, 2], 0.0));
    let loss = consistency_loss(&mut g, &[r], &[u]).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(r).map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
    assert_eq!(g.grad(u).unwrap().data(), &[-1.0, -1.0]);
}

#[test]
fn hand_next_item_loss_on_one_segment() {
    let p = ModelParams::<f64>::init(config(9, 8, 2, 2, 2, 2), 7).unwrap();
    let mut g = Graph::<f64>::new();
    let bp = p.bind(&mut g);
    let out = rec2pm_step(&mut g, &bp, &[&[4, 6]], &stage2(2, UpdateMode::Overwrite, 0.0, 0.0))
        .unwrap()
        .output(&g);
    let layout = SequenceLayout::unified(0, &[4, 6], 2);
    let h = reference_hidden(&p, &layout, None, &build_causal_mask(&layout));
    let expect = reference_ce(&p, &h[0], 6);
    assert!((out.loss_ar - expect).abs() < 1e-9, "{} vs {expect}", out.loss_ar);
    assert_eq!(out.loss_total, out.loss_ar);
    assert!(out.teacher_forced);
}

#[test]
fn reconstruction_is_decoding_from_memory() {
    let p = ModelParams::<f64>::init(config(9, 8, 1, 2, 2, 4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let content = Tensor::<f64>::uniform(&[4, 8], 0.5, &mut rng);
    for items in [vec![5u32], vec![2, 8, 1]] {
        let mut g = Graph::<f64>::new();
        let bp = p.bind(&mut g);
        let m = g.constant(content.clone());
        let loss = reconstruction_loss(&mut g, &bp, &[(m, items.as_slice())]).unwrap();
        let layout = SequenceLayout::decode(4, &items);
        let h = reference_hidden(&p, &layout, Some(&content), &build_causal_mask(&layout));
        let expect: f64 = items
            .iter()
            .enumerate()
            .map(|(j, &it)| reference_ce(&p, &h[3 + j], it as usize))
            .sum::<f64>()
            / items.len() as f64;
        assert!((g.value(loss).item() - expect).abs() < 1e-9);
    }
}

#[test]
fn reconstruction_gated_by_weight() {
    let p = ModelParams::<f32>::init(config(9, 8, 1, 2, 2, 3), 0).unwrap();
    let mut g = Graph::<f32>::new();
    let bp = p.bind(&mut g);
    let seq = [1u32, 2, 3, 4, 5, 6, 7];
    let out = rec2pm_step(&mut g, &bp, &[&seq], &stage2(3, UpdateMode::Overwrite, 1.0, 0.0))
        .unwrap()
        .output(&g);
    assert_eq!(out.loss_recon, 0.0);
    let mut g = Graph::<f32>::new();
    let bp = p.bind(&mut g);
    let out = rec2pm_step(&mut g, &bp, &[&seq], &stage2(3, UpdateMode::Overwrite, 1.0, 1.0))
        .unwrap()
        .output(&g);
    assert!(out.loss_recon > 0.0);
}

#[test]
fn serial_equals_parallel_on_single_segments() {
    let p = ModelParams::<f32>::init(config(15, 8, 2, 2, 2, 4), 5).unwrap();
    let seqs: Vec<&[u32]> = vec![&[1, 2, 3, 4], &[7, 7, 1], &[0, 14]];
    let mut g = Graph::<f32>::new();
    let bp = p.bind(&mut g);
    let par = rec2pm_step(&mut g, &bp, &seqs, &stage2(4, UpdateMode::Overwrite, 0.0, 0.0))
        .unwrap()
        .output(&g);
    let mut g = Graph::<f32>::new();
    let bp = p.bind(&mut g);
    let ser = serial_pass(&mut g, &bp, &seqs, 4, UpdateMode::Overwrite).unwrap().losses.output(&g);
    assert!((par.loss_total - ser.loss_total).abs() < 1e-6);
    assert!(!ser.teacher_forced);
}

#[test]
fn serial_memory_carries_no_gradient() {
    for mode in [UpdateMode::Overwrite, UpdateMode::Append] {
        let p = ModelParams::<f64>::init(config(15, 8, 2, 2, 2, 3), 2).unwrap();
        let mut g = Graph::<f64>::new();
        let bp = p.bind(&mut g);
        let seqs: Vec<&[u32]> = vec![&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10], &[3, 1, 4, 1, 5, 9, 2]];
        let pass = serial_pass(&mut g, &bp, &seqs, 3, mode).unwrap();
        assert_eq!(pass.embeddings.len(), 4);
        for h in 1..pass.segment_losses.len() {
            g.backward(pass.segment_losses[h]).unwrap();
            for earlier in &pass.embeddings[..h] {
                let grad = g.grad(*earlier);
                assert!(grad.map_or(true, |t| t.data().iter().all(|&x| x == 0.0)), "step {h}");
            }
            if pass.targets_per_segment[h] > 0 {
                let own = g.grad(pass.embeddings[h]).unwrap();
                assert!(own.data().iter().any(|&x| x != 0.0));
            }
        }
    }
}

#[test]
fn plain_window_counts() {
    assert_eq!(plain_instances(&[3; 16], 4), 4);
    assert_eq!(plain_instances(&[3; 1000], 1000), 1);
    let p = ModelParams::<f32>::init(config(15, 8, 1, 2, 1, 9), 5).unwrap();
    let seq: [u32; 9] = [1, 4, 2, 8, 5, 7, 0, 3, 3];
    let loss = |window| {
        let mut g = Graph::<f32>::new();
        let bp = p.bind(&mut g);
        plain_pass(&mut g, &bp, &[&seq], window).unwrap().output(&g).loss_total
    };
    assert_eq!(loss(9), loss(64));
}

#[test]
fn zero_epochs_return_initial_parameters() {
    let data = small_dataset(8, 0);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg()
    };
    let out = train(&data, &cfg).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.params, ModelParams::init(cfg.model_config(data.catalog_size), cfg.seed).unwrap());
}

#[test]
fn losses_fall_during_training() {
    let data = small_dataset(96, 1);
    let out = train(&data, &small_cfg()).unwrap();
    let total: Vec<f64> = out.log.iter().map(|e| e.loss_total).collect();
    assert!(total[0] > total[1] && total[1] > total[2], "{total:?}");
    let con: Vec<f64> = out.log.iter().map(|e| e.loss_con).collect();
    assert!(con[2] < con[0], "{con:?}");
    for e in &out.log {
        assert!(e.consistency_mse.is_some());
    }
}

#[test]
fn training_is_reproducible() {
    let data = small_dataset(24, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_cfg()
    };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn every_trainer_runs() {
    let data = small_dataset(16, 3);
    for trainer in [TrainerKind::TokSerial, TrainerKind::PlainShort, TrainerKind::PlainFull] {
        let cfg = TrainConfig {
            trainer,
            epochs: 1,
            ..small_cfg()
        };
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.params.config.with_memory, trainer.uses_memory());
        assert!(out.log[0].loss_total.is_finite());
    }
    let wrong = TrainConfig {
        trainer: TrainerKind::PlainShort,
        ..small_cfg()
    };
    assert!(train_rec2pm(&data, &wrong).is_err());
}

#[test]
fn training_sequence_window() {
    let items: Vec<u32> = (0..30).collect();
    let s = training_sequence(&items, 16).unwrap();
    assert_eq!(s, &items[11..28]);
    let short: Vec<u32> = (0..5).collect();
    assert_eq!(training_sequence(&short, 16).unwrap(), &short[..3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_decomposition_holds(seed in any::<u64>(), lambda in 0.0f64..3.0, w in 0.0f64..2.0, append in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if append { UpdateMode::Append } else { UpdateMode::Overwrite };
        let l_seg = rng.gen_range(2..5);
        let p = ModelParams::<f32>::init(config(12, 8, 1, 2, rng.gen_range(1..3), l_seg), seed).unwrap();
        let seqs = random_seqs(&mut rng, 3, 12, 14);
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::<f32>::new();
        let bp = p.bind(&mut g);
        let out = rec2pm_step(&mut g, &bp, &refs, &stage2(l_seg, mode, lambda, w)).unwrap().output(&g);
        let sum = out.loss_ar + lambda * out.loss_con + w * out.loss_recon;
        prop_assert!((out.loss_total - sum).abs() <= 1e-6 * out.loss_total.abs().max(1.0));
        prop_assert!(out.teacher_forced);
        prop_assert_eq!(out.m_ref.len(), out.m_upd.len());
    }

    #[test]
    fn stage2_order_and_batching_do_not_matter(seed in any::<u64>()) {
        let (batch_gap, order_gap) = stage2_batching(seed).unwrap();
        prop_assert!(batch_gap <= 1e-6 && order_gap <= 1e-6, "{batch_gap} {order_gap}");
    }

    #[test]
    fn consistency_matches_scalar_loop(pairs in 1usize..5, rows in 1usize..4, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let a: Vec<_> = (0..pairs).map(|_| g.constant(Tensor::uniform(&[rows, cols], 2.0, &mut rng))).collect();
        let b: Vec<_> = (0..pairs).map(|_| g.constant(Tensor::uniform(&[rows, cols], 2.0, &mut rng))).collect();
        let loss = consistency_loss(&mut g, &a, &b).unwrap();
        let mut total = 0.0;
        for (x, y) in a.iter().zip(&b) {
            let (x, y) = (g.value(*x).data(), g.value(*y).data());
            let mut s = 0.0;
            for i in 0..x.len() {
                s += (x[i] - y[i]) * (x[i] - y[i]);
            }
            total += s / x.len() as f64;
        }
        prop_assert!((g.value(loss).item() - total / pairs as f64).abs() < 1e-12);
    }

    #[test]
    fn one_reference_per_segment(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l_seg = rng.gen_range(1..5);
        let p = ModelParams::<f32>::init(config(12, 8, 1, 2, 2, l_seg), seed).unwrap();
        let seqs = random_seqs(&mut rng, 3, 12, 12);
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let batch = segment_batch(&refs, l_seg);
        let mut g = Graph::<f32>::inference();
        let bp = p.bind(&mut g);
        let m = stage1_reference_pass(&mut g, &bp, &batch).unwrap();
        for (segs, r) in batch.iter().zip(&m) {
            prop_assert_eq!(segs.len(), r.len());
            for v in r {
                prop_assert_eq!(g.value(*v).shape(), &[2, 8]);
            }
        }
    }
}

#[test]
#[ignore = "wall-clock comparison; meaningful only with several cores"]
fn serial_epoch_is_not_faster_than_parallel() {
    let data = rec2pm::data::generate_synthetic(&rec2pm::data::SyntheticSpec {
        n_users: 128,
        ..Default::default()
    })
    .unwrap();
    let epoch = |trainer| {
        let cfg = TrainConfig {
            trainer,
            epochs: 1,
            max_valid_users: 1,
            ..TrainConfig::default()
        };
        train(&data, &cfg).unwrap().log[0].train_seconds
    };
    let serial = epoch(TrainerKind::TokSerial);
    let parallel = epoch(TrainerKind::Rec2pm);
    println!("serial {serial:.3}s, parallel {parallel:.3}s per epoch");
    assert!(serial >= parallel, "serial {serial:.3}s < parallel {parallel:.3}s");
}
