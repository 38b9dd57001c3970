//! Multi-level fusion: lossless space-to-depth downsampling, soft nearest
//! upsampling, re-parameterizable convolutions and the fusion graph itself.

pub mod fsfpn;
pub mod rep;
pub mod resample;

pub use fsfpn::{fsfpn_forward, Downsampler, FsfpnConfig, FsfpnParams, Fuser, PyramidLevels};
pub use rep::{repc3_forward, repconv_forward, RepC3Params, RepConvParams};
pub use resample::{
    depth_to_space, sni, sni_upsample, space_to_depth, spdconv, upsample_factor, SniVariant,
    SpdConvParams,
};
