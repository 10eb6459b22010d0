//! Concept exemplar masking and VLM descriptions.

pub mod mask;
pub mod vlm;

pub use mask::{
    alpha_mask, decode_png, encode_png, heatmap_overlay, load_png, save_png, visible_fraction, SpatialActivationMap,
    DEFAULT_MASK_QUANTILE,
};
pub use vlm::{consolidate, Description, Reply, VlmClient, VlmConfig, VlmRequest, DEFAULT_KEY_ENV, DEFAULT_PROMPT};
