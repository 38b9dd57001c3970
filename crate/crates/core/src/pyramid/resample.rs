use crate::error::{shape_err, Result};
use crate::ops::layout::{depth_to_space_data, space_to_depth_data};
use crate::params::{Binding, ConvParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `[C,H,W]` → `[s²C, H/s, W/s]`; sub-pixel `(dy, dx)` lands in channel
/// block `dy·s + dx`.
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    space_to_depth_data(x, s)
}

pub fn depth_to_space(y: &Tensor, s: usize) -> Result<Tensor> {
    depth_to_space_data(y, s)
}

/// Space-to-depth by 2 followed by a stride-1 3×3 convolution `4C → C_out`.
#[derive(Clone, Debug)]
pub struct SpdConvParams {
    pub conv: ConvParams,
}

impl SpdConvParams {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(SpdConvParams {
            conv: ConvParams::new(store, &format!("{name}.conv"), 4 * c_in, c_out, 3, 1, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let y = tape.space_to_depth(x, 2)?;
        self.conv.forward(tape, params, y)
    }
}

pub fn spdconv(x: &Tensor, p: &SpdConvParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}

/// How the soft nearest-neighbour scale `α` is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SniVariant {
    /// `α = h/H` (per-axis resolution ratio).
    #[default]
    Linear,
    /// `α = (h·w)/(H·W)`.
    Area,
    /// `α = 1`, plain nearest-neighbour replication.
    Nearest,
}

impl SniVariant {
    pub fn alpha(self, k: usize) -> f64 {
        match self {
            SniVariant::Linear => 1.0 / k as f64,
            SniVariant::Area => 1.0 / (k * k) as f64,
            SniVariant::Nearest => 1.0,
        }
    }
}

/// Integer upsampling factor from `[h, w]` to `target`, equal on both axes.
pub fn upsample_factor(h: usize, w: usize, target: (usize, usize)) -> Result<usize> {
    let (th, tw) = target;
    if th % h != 0 || tw % w != 0 || th / h != tw / w || th < h {
        return Err(shape_err(format!(
            "cannot upsample {h}×{w} to {th}×{tw}: need one integer factor on both axes"
        )));
    }
    Ok(th / h)
}

/// `α · nearest(x)` at the target resolution.
pub fn sni(tape: &mut Tape, x: Var, target: (usize, usize), variant: SniVariant) -> Result<Var> {
    let &[_, h, w] = tape.shape(x) else {
        return Err(shape_err(format!(
            "upsample expects [C,H,W], got {:?}",
            tape.shape(x)
        )));
    };
    let k = upsample_factor(h, w, target)?;
    if k == 1 {
        return Ok(x);
    }
    let up = tape.upsample_nearest(x, k)?;
    let alpha = variant.alpha(k);
    Ok(if alpha == 1.0 {
        up
    } else {
        tape.scale(up, alpha)
    })
}

pub fn sni_upsample(x: &Tensor, target: (usize, usize), variant: SniVariant) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = sni(&mut tape, xv, target, variant)?;
    Ok(tape.value(y).clone())
}
