//! Flat run configuration: training, generator and protocol fields in one
//! JSON object, overridable field by field from the command line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, EvalProtocol, Split};
use crate::memory::UpdateMode;
use crate::training::{MseReduction, TrainConfig, TrainerKind};

/// Protocol fields that are neither training nor generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: EvalProtocol,
    pub split: Split,
    /// Shift used by the overlap protocol.
    pub overlap: usize,
    /// Users scored per evaluation; 0 means all.
    pub eval_users: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::MemIterative,
            split: Split::Test,
            overlap: TrainConfig::default().l_seg / 4,
            eval_users: 0,
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub eval: ProtocolConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if self.eval.overlap >= self.train.l_seg {
            return Err(Error::Config(format!(
                "overlap {} must be smaller than l_seg {}",
                self.eval.overlap, self.train.l_seg
            )));
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            overlap: self.eval.overlap,
            max_users: self.eval.eval_users,
            ..self.train.eval_options(self.eval.split)
        }
    }
}

macro_rules! layered_config {
    ($( $group:ident . $field:ident as $key:ident : $ty:ty = $help:literal ),* $(,)?) => {
        /// One source of settings (a JSON file or the command line). Unset
        /// fields fall through to the next source.
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, clap::Args)]
        #[serde(deny_unknown_fields)]
        pub struct ConfigLayer {
            $(
                #[arg(long, help = $help)]
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $key: Option<$ty>,
            )*
        }

        impl ConfigLayer {
            /// Writes every set field into `cfg`.
            pub fn apply(&self, cfg: &mut RunConfig) {
                $( if let Some(v) = &self.$key { cfg.$group.$field = v.clone(); } )*
            }

            /// Layer with every field set from `cfg`.
            pub fn snapshot(cfg: &RunConfig) -> Self {
                Self { $( $key: Some(cfg.$group.$field.clone()), )* }
            }

            /// Names of the fields this layer sets.
            pub fn set_fields(&self) -> Vec<&'static str> {
                let mut out = Vec::new();
                $( if self.$key.is_some() { out.push(stringify!($key)); } )*
                out
            }
        }
    };
}

layered_config! {
    train.l_seg as l_seg: usize = "Items per segment",
    train.l_full as l_full: usize = "Context length of the full baseline",
    train.slots as slots: usize = "Memory slots C",
    train.d_model as d_model: usize = "Embedding width",
    train.n_layers as n_layers: usize = "Transformer blocks",
    train.n_heads as n_heads: usize = "Attention heads",
    train.lr as lr: f64 = "AdamW learning rate",
    train.weight_decay as weight_decay: f64 = "AdamW decoupled weight decay",
    train.batch_size as batch_size: usize = "Users per step",
    train.lambda as lambda: f64 = "Consistency loss weight",
    train.mode as mode: UpdateMode = "Memory update mode: overwrite | append",
    train.epochs as epochs: usize = "Training epochs",
    train.early_stop_patience as early_stop_patience: usize = "Epochs without improvement before stopping",
    train.seed as seed: u64 = "Training seed",
    train.trainer as trainer: TrainerKind = "rec2pm | tok-serial | plain-short | plain-full",
    train.recon_weight as recon_weight: f64 = "Reconstruction loss weight",
    train.mse_reduction as mse_reduction: MseReduction = "Consistency reduction (mean)",
    train.max_valid_users as max_valid_users: usize = "Users scored for early stopping (0 = all)",
    data.n_users as n_users: usize = "Synthetic users",
    data.seq_len as seq_len: usize = "Synthetic sequence length",
    data.catalog_size as catalog_size: usize = "Catalog size",
    data.n_categories as n_categories: usize = "Item categories",
    data.prefs_per_user as prefs_per_user: usize = "Preferred categories per user",
    data.long_term_weight as long_term_weight: f64 = "Probability of a preferred-category draw",
    data.session_burst_len as session_burst_len: usize = "Length of a repeating session burst",
    data.noise_rate as noise_rate: f64 = "Probability of a uniform draw",
    data.popularity_skew as popularity_skew: f64 = "Zipf exponent inside a category",
    data.seed as data_seed: u64 = "Generator seed",
    eval.protocol as protocol: EvalProtocol = "short | full | mem-iterative | mem-oneoff | mem-overlap",
    eval.split as split: Split = "valid | test",
    eval.overlap as overlap: usize = "Overlap shift (default l_seg / 4)",
    eval.eval_users as eval_users: usize = "Users scored per evaluation (0 = all)",
}

impl ConfigLayer {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config schema: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }
}

/// Defaults, then `file`, then `flags`. Without an explicit overlap the
/// shift follows the resolved segment length; without an explicit protocol
/// the one matching the trainer is used.
pub fn resolve(file: Option<&ConfigLayer>, flags: &ConfigLayer) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(f) = file {
        f.apply(&mut cfg);
    }
    flags.apply(&mut cfg);
    let explicit = |pick: fn(&ConfigLayer) -> bool| pick(flags) || file.is_some_and(pick);
    if !explicit(|l| l.overlap.is_some()) {
        cfg.eval.overlap = cfg.train.l_seg / 4;
    }
    if !explicit(|l| l.protocol.is_some()) {
        cfg.eval.protocol = cfg.train.validation_protocol();
    }
    cfg.validate()?;
    Ok(cfg)
}
