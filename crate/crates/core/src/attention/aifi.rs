use crate::attention::deform::{reference_points, DeformAttnParams};
use crate::error::{shape_err, Result};
use crate::params::{Binding, LayerNormParams, LinearParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const POS_TEMPERATURE: f64 = 10000.0;
pub const LN_EPS: f64 = 1e-5;

/// 2D sin-cos position encoding `[H·W, d]` in row-major token order.
///
/// With `q = d/4` and `ω_t = T^(-t/q)`, token `(i, j)` gets
/// `[sin(jω), cos(jω), sin(iω), cos(iω)]`, each block `q` wide.
pub fn sincos_pos_embed(h: usize, w: usize, d: usize, temperature: f64) -> Result<Tensor> {
    if d % 4 != 0 || d == 0 {
        return Err(shape_err(format!(
            "sin-cos position encoding needs d divisible by 4, got {d}"
        )));
    }
    let q = d / 4;
    Ok(Tensor::from_fn(&[h * w, d], |idx| {
        let (tok, ch) = (idx / d, idx % d);
        let (block, t) = (ch / q, ch % q);
        let omega = temperature.powf(-(t as f64) / q as f64);
        let (i, j) = ((tok / w) as f64, (tok % w) as f64);
        match block {
            0 => (j * omega).sin(),
            1 => (j * omega).cos(),
            2 => (i * omega).sin(),
            _ => (i * omega).cos(),
        }
    }))
}

/// One intra-scale encoder layer with deformable attention:
///
/// ```text
/// t  = tokens(P5)                        [N, d]
/// a  = deform(t + pos, refs, P5)
/// u  = LN(t + a)
/// y  = LN(u + W2·silu(W1·u))
/// ```
#[derive(Clone, Debug)]
pub struct AifiParams {
    pub attn: DeformAttnParams,
    pub norm1: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub norm2: LayerNormParams,
    pub d_model: usize,
}

impl AifiParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        points: usize,
    ) -> Result<Self> {
        if d_model % 4 != 0 {
            return Err(shape_err(format!(
                "{name}: d_model must be divisible by 4, got {d_model}"
            )));
        }
        Ok(AifiParams {
            attn: DeformAttnParams::new(
                store,
                &format!("{name}.attn"),
                d_model,
                d_model,
                heads,
                points,
            )?,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), d_model, LN_EPS)?,
            ffn1: LinearParams::new(store, &format!("{name}.ffn1"), d_model, 4 * d_model)?,
            ffn2: LinearParams::new(store, &format!("{name}.ffn2"), 4 * d_model, d_model)?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), d_model, LN_EPS)?,
            d_model,
        })
    }

    /// `p5` is `[d, H, W]`; returns the same shape and the number of
    /// bilinear samples drawn.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, p5: Var) -> Result<(Var, usize)> {
        let &[c, h, w] = tape.shape(p5) else {
            return Err(shape_err(format!(
                "encoder expects [C,H,W], got {:?}",
                tape.shape(p5)
            )));
        };
        if c != self.d_model {
            return Err(shape_err(format!(
                "encoder built for {} channels, got {c}",
                self.d_model
            )));
        }
        let n = h * w;
        let flat = tape.reshape(p5, &[c, n])?;
        let tokens = tape.transpose2(flat)?;
        let pos = sincos_pos_embed(h, w, c, POS_TEMPERATURE)?;
        let queries = tape.add_const(tokens, &pos)?;
        let refs = reference_points(h, w);
        let a = self.attn.forward(tape, params, queries, &refs, p5)?;

        let u = tape.add(tokens, a.out)?;
        let u = self.norm1.forward(tape, params, u)?;
        let f = self.ffn1.forward(tape, params, u)?;
        let f = tape.silu(f);
        let f = self.ffn2.forward(tape, params, f)?;
        let y = tape.add(u, f)?;
        let y = self.norm2.forward(tape, params, y)?;

        let y = tape.transpose2(y)?;
        Ok((tape.reshape(y, &[c, h, w])?, a.samples))
    }
}

/// Applies the layers in order; returns the map and the total sample count.
pub fn da_aifi(p5: &Tensor, layers: &[AifiParams], store: &ParamStore) -> Result<(Tensor, usize)> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let mut x = tape.constant(p5.clone());
    let mut samples = 0;
    for layer in layers {
        let (y, s) = layer.forward(&mut tape, &params, x)?;
        x = y;
        samples += s;
    }
    Ok((tape.value(x).clone(), samples))
}
