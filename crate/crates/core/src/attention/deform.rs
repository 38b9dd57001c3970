use crate::error::{shape_err, Result};
use crate::params::{Binding, ConvParams, LinearParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Multi-head deformable attention over a single feature map.
///
/// Each query predicts `K` offsets and `K` softmax weights per head. Offsets
/// are in normalized units and are added to the query's reference point; the
/// value map is bilinearly sampled there and the samples are blended by the
/// weights. Offset and weight heads start at zero, so an untrained layer
/// samples every reference point `K` times with weight `1/K`.
#[derive(Clone, Debug)]
pub struct DeformAttnParams {
    pub value_proj: ConvParams,
    pub offset_head: LinearParams,
    pub weight_head: LinearParams,
    pub output_proj: LinearParams,
    pub d_model: usize,
    pub heads: usize,
    pub points: usize,
}

pub struct DeformOutput {
    /// `[N, d]`.
    pub out: Var,
    /// Softmax weights `[M, N, K]`.
    pub weights: Var,
    /// Sampling positions in pixel units `[M, N, K, 2]`, `(x, y)` order:
    /// `(ref + Δ)·(W, H) − ½`.
    pub locations: Var,
    /// Bilinear samples drawn by this call: `N·M·K`.
    pub samples: usize,
}

impl DeformAttnParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_value: usize,
        d_model: usize,
        heads: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || points == 0 || d_model % heads != 0 {
            return Err(shape_err(format!(
                "{name}: d_model {d_model} must split evenly over {heads} heads with at least one point"
            )));
        }
        let mk = heads * points;
        Ok(DeformAttnParams {
            value_proj: ConvParams::new(
                store,
                &format!("{name}.value_proj"),
                c_value,
                d_model,
                1,
                1,
                true,
            )?,
            offset_head: LinearParams::zeros(store, &format!("{name}.offsets"), d_model, 2 * mk)?,
            weight_head: LinearParams::zeros(store, &format!("{name}.weights"), d_model, mk)?,
            output_proj: LinearParams::new(
                store,
                &format!("{name}.output_proj"),
                d_model,
                d_model,
            )?,
            d_model,
            heads,
            points,
        })
    }

    /// `queries` is `[N, d]`, `refs` holds normalized `(x, y)` reference
    /// points `[N, 2]` in `[0, 1]`, `value_map` is `[C, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        queries: Var,
        refs: &Tensor,
        value_map: Var,
    ) -> Result<DeformOutput> {
        let (m, k, d) = (self.heads, self.points, self.d_model);
        let dh = d / m;
        let n = match tape.shape(queries) {
            &[n, dq] if dq == d => n,
            s => {
                return Err(shape_err(format!(
                    "deformable attention expects queries [N,{d}], got {s:?}"
                )))
            }
        };
        if refs.shape() != [n, 2] {
            return Err(shape_err(format!(
                "reference points must be [{n},2], got {:?}",
                refs.shape()
            )));
        }
        let (h, w) = match tape.shape(value_map) {
            &[_, h, w] => (h, w),
            s => return Err(shape_err(format!("value map must be [C,H,W], got {s:?}"))),
        };

        let value = self.value_proj.forward(tape, params, value_map)?;

        let base = Tensor::from_fn(&[n, m, k, 2], |i| {
            let (row, axis) = (i / (m * k * 2), i % 2);
            let extent = if axis == 0 { w } else { h } as f64;
            refs.data()[2 * row + axis] * extent - 0.5
        });
        let off = self.offset_head.forward(tape, params, queries)?;
        let off = tape.reshape(off, &[n, m, k, 2])?;
        let extents = Tensor::from_fn(
            &[n, m, k, 2],
            |i| if i % 2 == 0 { w as f64 } else { h as f64 },
        );
        let off = tape.mul_const(off, &extents)?;
        let locs = tape.add_const(off, &base)?;
        let locs = tape.permute(locs, &[1, 0, 2, 3])?;

        let logits = self.weight_head.forward(tape, params, queries)?;
        let logits = tape.reshape(logits, &[n * m, k])?;
        let weights = tape.softmax(logits, 1)?;
        let weights = tape.reshape(weights, &[n, m, k])?;
        let weights = tape.permute(weights, &[1, 0, 2])?;

        let mut heads = Vec::with_capacity(m);
        for head in 0..m {
            let vh = tape.narrow(value, 0, head * dh, dh)?;
            let lh = tape.narrow(locs, 0, head, 1)?;
            let lh = tape.reshape(lh, &[n * k, 2])?;
            let s = tape.bilinear_sample(vh, lh)?;
            let s = tape.reshape(s, &[n, k, dh])?;
            let wh = tape.narrow(weights, 0, head, 1)?;
            let wh = tape.reshape(wh, &[n, 1, k])?;
            let o = tape.bmm(wh, s)?;
            heads.push(tape.reshape(o, &[n, dh])?);
        }
        let cat = tape.concat(&heads, 1)?;
        let out = self.output_proj.forward(tape, params, cat)?;
        Ok(DeformOutput {
            out,
            weights,
            locations: locs,
            samples: n * m * k,
        })
    }
}

/// Normalized pixel-centre reference points `((j+½)/W, (i+½)/H)` in
/// row-major token order.
pub fn reference_points(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h * w, 2], |i| {
        let (tok, axis) = (i / 2, i % 2);
        if axis == 0 {
            ((tok % w) as f64 + 0.5) / w as f64
        } else {
            ((tok / w) as f64 + 0.5) / h as f64
        }
    })
}

/// Runs one call on constants and returns `(output [N,d], samples drawn)`.
pub fn deformable_attention(
    queries: &Tensor,
    refs: &Tensor,
    value_map: &Tensor,
    p: &DeformAttnParams,
    store: &ParamStore,
) -> Result<(Tensor, usize)> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let q = tape.constant(queries.clone());
    let v = tape.constant(value_map.clone());
    let r = p.forward(&mut tape, &params, q, refs, v)?;
    Ok((tape.value(r.out).clone(), r.samples))
}
