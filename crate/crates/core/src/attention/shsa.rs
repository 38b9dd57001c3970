use crate::error::{shape_err, Result};
use crate::params::{Binding, ConvParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fraction of channels routed through attention.
pub const SPLIT_RATIO: f64 = 0.5;

/// Single-head split attention: the first half of the channels attends over
/// all `H·W` positions, the second half passes through untouched, and a 1×1
/// projection mixes the two. Both projections are bias-free, so an all-zero
/// input maps to zero.
#[derive(Clone, Debug)]
pub struct ShsaParams {
    pub qkv: ConvParams,
    pub out_proj: ConvParams,
    pub channels: usize,
    pub d_attn: usize,
}

impl ShsaParams {
    /// `d_attn` defaults to `C/2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        d_attn: Option<usize>,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(shape_err(format!(
                "{name}: split attention needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let d_attn = d_attn.unwrap_or(half);
        Ok(ShsaParams {
            qkv: ConvParams::new(store, &format!("{name}.qkv"), half, 3 * d_attn, 1, 1, false)?,
            out_proj: ConvParams::new(
                store,
                &format!("{name}.proj"),
                d_attn + half,
                channels,
                1,
                1,
                false,
            )?,
            channels,
            d_attn,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let &[c, h, w] = tape.shape(x) else {
            return Err(shape_err(format!(
                "split attention expects [C,H,W], got {:?}",
                tape.shape(x)
            )));
        };
        if c != self.channels {
            return Err(shape_err(format!(
                "split attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let (half, d, n) = (c / 2, self.d_attn, h * w);
        let attended = tape.narrow(x, 0, 0, half)?;
        let passthrough = tape.narrow(x, 0, half, half)?;

        let qkv = self.qkv.forward(tape, params, attended)?;
        let qkv = tape.reshape(qkv, &[3 * d, n])?;
        let q = tape.narrow(qkv, 0, 0, d)?;
        let q = tape.transpose2(q)?;
        let k = tape.narrow(qkv, 0, d, d)?;
        let v = tape.narrow(qkv, 0, 2 * d, d)?;
        let v = tape.transpose2(v)?;

        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax(scores, 1)?;
        let mixed = tape.matmul(attn, v)?;
        let mixed = tape.transpose2(mixed)?;
        let mixed = tape.reshape(mixed, &[d, h, w])?;

        let cat = tape.concat(&[mixed, passthrough], 0)?;
        self.out_proj.forward(tape, params, cat)
    }
}

pub fn shsa_forward(x: &Tensor, p: &ShsaParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}
