//! Causal transformer shared by memory encoding and next-item decoding,
//! together with the input layouts and attention masks it runs on.

mod layout;
mod model;
mod params;

pub use layout::{
    build_causal_mask, build_stage1_mask, AttentionMask, Role, SequenceLayout, Slot,
};
pub use model::{
    batched_mask, embed_layout, gather_rows, item_logits, mask_for, run_batched, run_layout,
    transformer_forward, Forward, MaskKind, LN_EPS,
};
pub use params::{BoundLayer, BoundParams, LayerParams, ModelConfig, ModelParams};
