//! Shared oracles for the integration tests.
#![allow(dead_code)]

use rec2pm::backbone::{AttentionMask, ModelConfig, ModelParams, Role, SequenceLayout, LN_EPS};
use rec2pm::data::{generate_synthetic, Dataset, SyntheticSpec};
use rec2pm::tensor::Tensor;

pub fn config(n_items: usize, d: usize, layers: usize, heads: usize, slots: usize, pos: usize) -> ModelConfig {
    ModelConfig {
        n_items,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        slots,
        max_positions: pos,
        with_memory: true,
    }
}

/// Small synthetic corpus: 4 full segments of 4 items per training sequence.
pub fn small_dataset(n_users: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_users,
        seq_len: 19,
        catalog_size: 30,
        n_categories: 5,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn row_vals(t: &Tensor<f64>, r: usize) -> Vec<f64> {
    t.row(r).to_vec()
}

/// Embedding of each slot computed from the tables directly.
pub fn reference_embed(p: &ModelParams<f64>, layout: &SequenceLayout, memory: Option<&Tensor<f64>>) -> Vec<Vec<f64>> {
    let c = p.config.slots;
    layout
        .slots()
        .iter()
        .map(|s| {
            let parts: Vec<Vec<f64>> = match s.role {
                Role::Item => vec![
                    row_vals(&p.item_emb, s.item.unwrap() as usize),
                    row_vals(&p.pos_emb, s.within),
                    row_vals(&p.role_emb, 1),
                ],
                Role::Query => vec![
                    row_vals(&p.q_mem, s.within),
                    row_vals(&p.slot_emb, s.within),
                    row_vals(&p.role_emb, 2),
                ],
                Role::Memory => vec![
                    row_vals(memory.unwrap(), s.within),
                    row_vals(&p.slot_emb, s.within % c),
                    row_vals(&p.role_emb, 0),
                ],
            };
            (0..p.config.d_model).map(|k| parts.iter().map(|v| v[k]).sum()).collect()
        })
        .collect()
}

pub fn ln(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(k, v)| (v - mean) * r * g.data()[k] + b.data()[k])
        .collect()
}

pub fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Scalar-loop transformer over a dense boolean mask.
pub fn reference_forward(p: &ModelParams<f64>, x: Vec<Vec<f64>>, mask: &AttentionMask) -> Vec<Vec<f64>> {
    let t = x.len();
    let d = p.config.d_model;
    let heads = p.config.n_heads;
    let dh = d / heads;
    let mut h = x;
    for l in &p.layers {
        let a: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &l.ln1_g, &l.ln1_b)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| vecmat(r, &l.wq)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| vecmat(r, &l.wk)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| vecmat(r, &l.wv)).collect();
        let mut att = vec![vec![0.0; d]; t];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..t {
                let keys: Vec<usize> = (0..t).filter(|&j| mask.get(i, j)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (&j, s) in keys.iter().zip(&scores) {
                    let w = (s - m).exp() / z;
                    for c in cols.clone() {
                        att[i][c] += w * v[j][c];
                    }
                }
            }
        }
        for i in 0..t {
            let o = vecmat(&att[i], &l.wo);
            for c in 0..d {
                h[i][c] += o[c];
            }
            let b = ln(&h[i], &l.ln2_g, &l.ln2_b);
            let f: Vec<f64> = vecmat(&b, &l.ff1_w)
                .iter()
                .zip(l.ff1_b.data())
                .map(|(x, bias)| gelu(x + bias))
                .collect();
            let f = vecmat(&f, &l.ff2_w);
            for c in 0..d {
                h[i][c] += f[c] + l.ff2_b.data()[c];
            }
        }
    }
    h.iter().map(|r| ln(r, &p.lnf_g, &p.lnf_b)).collect()
}


/// Hidden rows of `layout` from the scalar reference.
pub fn reference_hidden(p: &ModelParams<f64>, layout: &SequenceLayout, memory: Option<&Tensor<f64>>, mask: &AttentionMask) -> Vec<Vec<f64>> {
    reference_forward(p, reference_embed(p, layout, memory), mask)
}

/// Numerically stable `-log softmax(h · Eᵀ)[target]`.
pub fn reference_ce(p: &ModelParams<f64>, hidden: &[f64], target: usize) -> f64 {
    let logits: Vec<f64> = (0..p.config.n_items)
        .map(|i| p.item_emb.row(i).iter().zip(hidden).map(|(a, b)| a * b).sum())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    z.ln() + m - logits[target]
}

/// `h · Eᵀ` over the whole catalog.
pub fn reference_logits(p: &ModelParams<f64>, hidden: &[f64]) -> Vec<f64> {
    (0..p.config.n_items)
        .map(|i| p.item_emb.row(i).iter().zip(hidden).map(|(a, b)| a * b).sum())
        .collect()
}
