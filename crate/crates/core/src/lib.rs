//! Differentiable building blocks for frequency-spatial small-object
//! detection: a dense `f64` tensor engine with a reverse-mode tape, the
//! spectral and Scharr branches of the cross-domain block, split and
//! deformable attention, the resampling pyramid with re-parameterizable
//! convolutions, detection losses, and a desk-scale training harness.

pub mod attention;
pub mod cfsb;
pub mod dump;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod pyramid;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{
    Activation, Binding, ConvParams, Init, LayerNormParams, LinearParams, ParamId, ParamStore,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
