use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSlot, Scalar, Tensor, Var};

/// Architecture hyperparameters that determine every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_items: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Memory slots `C`.
    pub slots: usize,
    /// Size of the item position table.
    pub max_positions: usize,
    /// Whether the model was built for memory protocols.
    pub with_memory: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.d_model == 0 || self.max_positions == 0 || self.slots == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub ff1_w: Tensor<T>,
    pub ff1_b: Tensor<T>,
    pub ff2_w: Tensor<T>,
    pub ff2_b: Tensor<T>,
}

/// All trainable weights. The output head is tied to `item_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub item_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub slot_emb: Tensor<T>,
    /// Rows indexed by [`super::Role`].
    pub role_emb: Tensor<T>,
    pub q_mem: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
}

const EMB_STD: f64 = 0.05;

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.ffn_dim();
        let emb = EMB_STD * 3f64.sqrt();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let out_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let item_emb = Tensor::uniform(&[config.n_items, d], emb, &mut rng);
        let pos_emb = Tensor::uniform(&[config.max_positions, d], emb, &mut rng);
        let slot_emb = Tensor::uniform(&[config.slots, d], emb, &mut rng);
        let role_emb = Tensor::uniform(&[3, d], emb, &mut rng);
        let q_mem = Tensor::uniform(&[config.slots, d], emb, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::filled(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::uniform(&[d, d], lin(d), &mut rng),
                wk: Tensor::uniform(&[d, d], lin(d), &mut rng),
                wv: Tensor::uniform(&[d, d], lin(d), &mut rng),
                wo: Tensor::uniform(&[d, d], lin(d) * out_scale, &mut rng),
                ln2_g: Tensor::filled(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                ff1_w: Tensor::uniform(&[d, f], lin(d), &mut rng),
                ff1_b: Tensor::zeros(&[f]),
                ff2_w: Tensor::uniform(&[f, d], lin(f) * out_scale, &mut rng),
                ff2_b: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            item_emb,
            pos_emb,
            slot_emb,
            role_emb,
            q_mem,
            layers,
            lnf_g: Tensor::filled(&[d], T::one()),
            lnf_b: Tensor::zeros(&[d]),
        })
    }

    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("item_emb".to_string(), &self.item_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("slot_emb".to_string(), &self.slot_emb),
            ("role_emb".to_string(), &self.role_emb),
            ("q_mem".to_string(), &self.q_mem),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("ln1_g", &p.ln1_g),
                ("ln1_b", &p.ln1_b),
                ("wq", &p.wq),
                ("wk", &p.wk),
                ("wv", &p.wv),
                ("wo", &p.wo),
                ("ln2_g", &p.ln2_g),
                ("ln2_b", &p.ln2_b),
                ("ff1_w", &p.ff1_w),
                ("ff1_b", &p.ff1_b),
                ("ff2_w", &p.ff2_w),
                ("ff2_b", &p.ff2_b),
            ] {
                out.push((format!("layers.{l}.{n}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.item_emb,
            &mut self.pos_emb,
            &mut self.slot_emb,
            &mut self.role_emb,
            &mut self.q_mem,
        ];
        for p in self.layers.iter_mut() {
            out.extend([
                &mut p.ln1_g,
                &mut p.ln1_b,
                &mut p.wq,
                &mut p.wk,
                &mut p.wv,
                &mut p.wo,
                &mut p.ln2_g,
                &mut p.ln2_b,
                &mut p.ff1_w,
                &mut p.ff1_b,
                &mut p.ff2_w,
                &mut p.ff2_b,
            ]);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    /// Optimizer slots for the selected parameter indices; rank-2 weights decay.
    pub fn slots_for(&mut self, indices: &[usize]) -> Vec<ParamSlot<'_, T>> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut tensors: Vec<Option<&mut Tensor<T>>> =
            self.tensors_mut().into_iter().map(Some).collect();
        indices
            .iter()
            .map(|&i| {
                let value = tensors[i].take().expect("duplicate parameter index");
                let decay = value.shape().len() == 2;
                ParamSlot {
                    name: names[i].clone(),
                    value,
                    decay,
                }
            })
            .collect()
    }

    /// Indices into [`Self::named`] that receive gradients. Plain models never
    /// touch the memory queries or slot embeddings.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.named().len())
            .filter(|&i| self.config.with_memory || (i != 2 && i != 4))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            item_emb: self.item_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            slot_emb: self.slot_emb.cast(),
            role_emb: self.role_emb.cast(),
            q_mem: self.q_mem.cast(),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    ln1_g: p.ln1_g.cast(),
                    ln1_b: p.ln1_b.cast(),
                    wq: p.wq.cast(),
                    wk: p.wk.cast(),
                    wv: p.wv.cast(),
                    wo: p.wo.cast(),
                    ln2_g: p.ln2_g.cast(),
                    ln2_b: p.ln2_b.cast(),
                    ff1_w: p.ff1_w.cast(),
                    ff1_b: p.ff1_b.cast(),
                    ff2_w: p.ff2_w.cast(),
                    ff2_b: p.ff2_b.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
        }
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let mut leaf = |t: &Tensor<T>| g.param(t.clone());
        BoundParams {
            item_emb: leaf(&self.item_emb),
            pos_emb: leaf(&self.pos_emb),
            slot_emb: leaf(&self.slot_emb),
            role_emb: leaf(&self.role_emb),
            q_mem: leaf(&self.q_mem),
            layers: self
                .layers
                .iter()
                .map(|p| BoundLayer {
                    ln1_g: leaf(&p.ln1_g),
                    ln1_b: leaf(&p.ln1_b),
                    wq: leaf(&p.wq),
                    wk: leaf(&p.wk),
                    wv: leaf(&p.wv),
                    wo: leaf(&p.wo),
                    ln2_g: leaf(&p.ln2_g),
                    ln2_b: leaf(&p.ln2_b),
                    ff1_w: leaf(&p.ff1_w),
                    ff1_b: leaf(&p.ff1_b),
                    ff2_w: leaf(&p.ff2_w),
                    ff2_b: leaf(&p.ff2_b),
                })
                .collect(),
            lnf_g: leaf(&self.lnf_g),
            lnf_b: leaf(&self.lnf_b),
            n_heads: self.config.n_heads,
            slots: self.config.slots,
            max_positions: self.config.max_positions,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
}

/// [`ModelParams`] recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub item_emb: Var,
    pub pos_emb: Var,
    pub slot_emb: Var,
    pub role_emb: Var,
    pub q_mem: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub n_heads: usize,
    pub slots: usize,
    pub max_positions: usize,
}

impl BoundParams {
    /// Vars in the same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.item_emb,
            self.pos_emb,
            self.slot_emb,
            self.role_emb,
            self.q_mem,
        ];
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.wq, l.wk, l.wv, l.wo, l.ln2_g, l.ln2_b, l.ff1_w, l.ff1_b,
                l.ff2_w, l.ff2_b,
            ]);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_items: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            slots: 3,
            max_positions: 5,
            with_memory: true,
        }
    }

    #[test]
    fn shapes_follow_config() {
        let p = ModelParams::<f32>::init(cfg(), 1).unwrap();
        assert_eq!(p.q_mem.shape(), &[3, 8]);
        assert_eq!(p.pos_emb.shape(), &[5, 8]);
        assert_eq!(p.layers[0].ff1_w.shape(), &[8, 32]);
        assert_eq!(p.named().len(), 5 + 2 * 12 + 2);
        assert_eq!(p.named().len(), p.bind(&mut Graph::new()).vars().len());
    }

    #[test]
    fn heads_must_divide_dim() {
        let bad = ModelConfig {
            n_heads: 3,
            ..cfg()
        };
        assert!(ModelParams::<f32>::init(bad, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f32>::init(cfg(), 7).unwrap();
        let b = ModelParams::<f32>::init(cfg(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::<f32>::init(cfg(), 8).unwrap());
    }
}
