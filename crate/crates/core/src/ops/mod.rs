//! Differentiable primitives recorded on a [`Tape`](crate::tape::Tape).

pub mod conv;
pub mod elementwise;
pub mod layout;
pub mod linalg;
pub mod norm;
pub mod sample;
pub mod softmax;

pub use conv::ConvGeom;
pub use elementwise::sigmoid;
pub use sample::bilinear_sample_data;
pub use softmax::softmax_data;
