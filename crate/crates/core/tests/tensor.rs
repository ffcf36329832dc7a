use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rec2pm::tensor::{matmul, AdamW, AdamWConfig, Graph, MaskRows, ParamSlot, Tensor};
use rec2pm::verify::{gradcheck, op_cases};

fn t(rows: &[Vec<f32>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_hand_product() {
    let a = t(&[vec![1., 2.], vec![3., 4.]]);
    let b = t(&[vec![5.], vec![6.]]);
    assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);
    let mut g = Graph::<f32>::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[17., 39.]);
}

#[test]
fn identity_and_negation() {
    let x = t(&[vec![0.3], vec![-2.5]]);
    let i = Tensor::identity(2);
    assert_eq!(matmul(&i, &x).unwrap(), x);
    let mut g = Graph::<f32>::new();
    let vx = g.constant(x);
    let n = g.neg(vx);
    let z = g.add(vx, n).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn closed_form_values() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 4]));
    let s = g.softmax(z);
    assert_eq!(g.value(s).data(), &[0.25; 4]);
    let x = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 7.0]).unwrap());
    let m = g.mse(x, x).unwrap();
    assert_eq!(g.value(m).item(), 0.0);
    let logits = g.constant(Tensor::zeros(&[1, 2]));
    let ce = g.cross_entropy(logits, &[0]).unwrap();
    assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn analytic_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);

    let mut g = Graph::<f64>::new();
    let w = g.param(Tensor::new(vec![1], vec![3.]).unwrap());
    let zero = g.constant(Tensor::zeros(&[1]));
    let loss = g.mse(w, zero).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[6.]);
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        Tensor::<f64>::uniform(&[5, 4], 1.0, &mut rng),
        Tensor::uniform(&[4, 6], 0.7, &mut rng),
        Tensor::uniform(&[6], 0.3, &mut rng),
        Tensor::uniform(&[6, 3], 0.7, &mut rng),
    ];
    let target = Tensor::<f64>::uniform(&[5, 3], 1.0, &mut rng);
    let err = gradcheck(&inputs, 1e-3, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.gelu(h);
        let y = g.matmul(h, v[3])?;
        let t = g.constant(target.clone());
        g.mse(y, t)
    })
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
}

#[test]
fn adamw_hand_trace() {
    // Two steps on f(w) = w², w0 = 1, lr 0.1, default betas, no decay.
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
    let mut opt = AdamW::<f64>::new(cfg);
    let mut w = Tensor::new(vec![1], vec![1.0f64]).unwrap();
    let (mut m, mut v, mut expect) = (0.0, 0.0, 1.0f64);
    for step in 1..=2 {
        let grad = 2.0 * expect;
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad * grad;
        let mh = m / (1.0 - b1.powi(step));
        let vh = v / (1.0 - b2.powi(step));
        expect -= 0.1 * mh / (vh.sqrt() + eps);
        let g = Tensor::new(vec![1], vec![2.0 * w.data()[0]]).unwrap();
        opt.step(
            vec![ParamSlot {
                name: "w".into(),
                value: &mut w,
                decay: true,
            }],
            &[Some(g)],
        )
        .unwrap();
        assert!((w.data()[0] - expect).abs() < 1e-12, "step {step}");
    }
    assert!(w.data()[0] < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn every_op_passes_gradcheck(seed in 0u64..10_000) {
        for case in op_cases(seed) {
            let err = gradcheck(&case.inputs, 1e-3, case.build).unwrap();
            prop_assert!(err < 1e-3, "{}: {err}", case.name);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::uniform(&[rows, cols], 8.0, &mut rng));
        let s = g.softmax(x);
        for r in 0..rows {
            let sum: f64 = g.value(s).row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(rows in 1usize..5, cols in 4usize..33, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::uniform(&[rows, cols], 3.0, &mut rng));
        let gamma = g.constant(Tensor::filled(&[cols], 1.0));
        let beta = g.constant(Tensor::zeros(&[cols]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_share_parameter_shape(rows in 1usize..5, inner in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::uniform(&[rows, inner], 1.0, &mut rng));
        let b = g.param(Tensor::uniform(&[inner, cols], 1.0, &mut rng));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        let (ga, gb) = (g.grad(a).unwrap(), g.grad(b).unwrap());
        prop_assert_eq!(ga.shape(), &[rows, inner]);
        prop_assert_eq!(gb.shape(), &[inner, cols]);
        prop_assert_eq!(g.value(c).len(), rows * cols);
    }

    #[test]
    fn attention_is_deterministic(t in 1usize..7, seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f32>::new();
            let q = g.param(Tensor::uniform(&[t, 4], 1.0, &mut rng));
            let k = g.param(Tensor::uniform(&[t, 4], 1.0, &mut rng));
            let v = g.param(Tensor::uniform(&[t, 4], 1.0, &mut rng));
            let mask = Rc::new(MaskRows::new((0..t as u32).map(|i| (0..=i).collect()).collect()));
            let a = g.attention(q, k, v, mask, 2).unwrap();
            let loss = g.sum(a);
            g.backward(loss).unwrap();
            (g.value(a).clone(), g.grad(q).unwrap())
        };
        prop_assert_eq!(run(), run());
    }
}
