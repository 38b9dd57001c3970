//! Attention blocks: split single-head attention, the C2f family built on
//! it, and deformable attention with the intra-scale encoder layer.

pub mod aifi;
pub mod c2f;
pub mod deform;
pub mod shsa;

pub use aifi::{da_aifi, sincos_pos_embed, AifiParams};
pub use c2f::{c2f_forward, shab_forward, BlockKind, Bottleneck, C2fParams};
pub use deform::{deformable_attention, reference_points, DeformAttnParams, DeformOutput};
pub use shsa::{shsa_forward, ShsaParams, SPLIT_RATIO};
