//! Cross-domain frequency-spatial block.
//!
//! ```text
//! grad    = Gx(x) + Gy(x)                 (fixed depthwise Scharr kernels)
//! spatial = conv2(conv1(grad) + x)
//! freq    = outer(idft2(mask(dft2(x))))
//! out     = fuse(spatial + freq)
//! ```
//!
//! `conv1`/`conv2` are 3×3 with padding 1, `outer` and `fuse` are 1×1. All
//! three sums are plain element-wise additions.

use crate::error::Result;
use crate::params::{Activation, Binding, ConvParams, ParamStore};
use crate::spectral::FreqBranchParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Horizontal Scharr kernel (responds to changes along columns).
pub const SCHARR_X: [[f64; 3]; 3] = [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]];
/// Vertical Scharr kernel, the transpose of [`SCHARR_X`].
pub const SCHARR_Y: [[f64; 3]; 3] = [[-3.0, -10.0, -3.0], [0.0, 0.0, 0.0], [3.0, 10.0, 3.0]];

#[derive(Clone, Debug)]
pub struct CfsbParams {
    pub spatial_conv1: ConvParams,
    pub spatial_conv2: ConvParams,
    pub freq: FreqBranchParams,
    pub fuse: ConvParams,
    /// Applied after `conv1`, `conv2`, `outer` and `fuse` (never to the
    /// spectral mask).
    pub act: Activation,
}

impl CfsbParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        act: Activation,
    ) -> Result<Self> {
        let c = channels;
        Ok(CfsbParams {
            spatial_conv1: ConvParams::new(store, &format!("{name}.spatial1"), c, c, 3, 1, true)?,
            spatial_conv2: ConvParams::new(store, &format!("{name}.spatial2"), c, c, 3, 1, true)?,
            freq: FreqBranchParams::new(store, &format!("{name}.freq"), c)?,
            fuse: ConvParams::new(store, &format!("{name}.fuse"), c, c, 1, 1, true)?,
            act,
        })
    }

    pub fn channels(&self) -> usize {
        self.fuse.c_out
    }

    pub fn spatial_forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let g = scharr(tape, x)?;
        let c1 = self.spatial_conv1.forward(tape, params, g)?;
        let c1 = self.act.apply(tape, c1);
        let res = tape.add(c1, x)?;
        let c2 = self.spatial_conv2.forward(tape, params, res)?;
        Ok(self.act.apply(tape, c2))
    }

    pub fn freq_forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let y = self.freq.forward(tape, params, x)?;
        Ok(self.act.apply(tape, y))
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let s = self.spatial_forward(tape, params, x)?;
        let f = self.freq_forward(tape, params, x)?;
        let sum = tape.add(s, f)?;
        let y = self.fuse.forward(tape, params, sum)?;
        Ok(self.act.apply(tape, y))
    }
}

/// `Gx(x) + Gy(x)`, applied per channel with zero padding 1.
pub fn scharr(tape: &mut Tape, x: Var) -> Result<Var> {
    let gx = tape.depthwise_fixed3x3(x, SCHARR_X)?;
    let gy = tape.depthwise_fixed3x3(x, SCHARR_Y)?;
    tape.add(gx, gy)
}

fn run(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

pub fn scharr_grad(x: &Tensor) -> Result<Tensor> {
    run(x, scharr)
}

pub fn cfsb_spatial_branch(x: &Tensor, p: &CfsbParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.spatial_forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}

pub fn cfsb_forward(x: &Tensor, p: &CfsbParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}
