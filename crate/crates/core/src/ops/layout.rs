//! Shape-only operations: reshape, permutations, slicing and the lossless
//! space/depth rearrangements.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, strides, Tensor};

/// Permutes the axes of `data` (with shape `shape`) so output axis `i` is
/// input axis `axes[i]`.
pub fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// `[C,H,W] → [s²C, H/s, W/s]`; sub-pixel `(dy,dx)` lands in channel block
/// `dy·s + dx`.
pub fn space_to_depth_data(x: &Tensor, s: usize) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(shape_err(format!(
            "space_to_depth expects [C,H,W], got {:?}",
            x.shape()
        )));
    };
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(shape_err(format!(
            "space_to_depth: extents {h}×{w} not divisible by block {s}"
        )));
    }
    let (ho, wo) = (h / s, w / s);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for dy in 0..s {
        for dx in 0..s {
            let block = dy * s + dx;
            for ch in 0..c {
                let oc = block * c + ch;
                for i in 0..ho {
                    for j in 0..wo {
                        out[(oc * ho + i) * wo + j] = xd[(ch * h + i * s + dy) * w + j * s + dx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![s * s * c, ho, wo], out))
}

/// Inverse of [`space_to_depth_data`].
pub fn depth_to_space_data(y: &Tensor, s: usize) -> Result<Tensor> {
    let &[cs, ho, wo] = y.shape() else {
        return Err(shape_err(format!(
            "depth_to_space expects [C,H,W], got {:?}",
            y.shape()
        )));
    };
    if s == 0 || cs % (s * s) != 0 {
        return Err(shape_err(format!(
            "depth_to_space: {cs} channels not divisible by {}",
            s * s
        )));
    }
    let (c, h, w) = (cs / (s * s), ho * s, wo * s);
    let yd = y.data();
    let mut out = vec![0.0; yd.len()];
    for dy in 0..s {
        for dx in 0..s {
            let block = dy * s + dx;
            for ch in 0..c {
                let oc = block * c + ch;
                for i in 0..ho {
                    for j in 0..wo {
                        out[(ch * h + i * s + dy) * w + j * s + dx] = yd[(oc * ho + i) * wo + j];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Nearest-neighbour replication of `[C,h,w]` by integer factor `k`.
pub fn upsample_nearest_data(x: &Tensor, k: usize) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(shape_err(format!(
            "upsample expects [C,H,W], got {:?}",
            x.shape()
        )));
    };
    let (ho, wo) = (h * k, w * k);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            let row = &xd[(ch * h + i / k) * w..(ch * h + i / k + 1) * w];
            for j in 0..wo {
                out.push(row[j / k]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

/// Adjoint of nearest upsampling: sums each `k×k` block.
fn block_sum(g: &Tensor, k: usize) -> Tensor {
    let &[c, ho, wo] = g.shape() else {
        unreachable!()
    };
    let (h, w) = (ho / k, wo / k);
    let gd = g.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                out[(ch * h + i / k) * w + j / k] += gd[(ch * ho + i) * wo + j];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_op(
            "reshape",
            &[a],
            out,
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .reshape(args.inputs[0].shape())
                        .expect("same element count"),
                )]
            }),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut seen = vec![false; v.rank()];
        if axes.len() != v.rank()
            || axes
                .iter()
                .any(|&x| x >= v.rank() || std::mem::replace(&mut seen[x], true))
        {
            return Err(shape_err(format!(
                "permute: {axes:?} is not a permutation of rank {}",
                v.rank()
            )));
        }
        let (shape, data) = permute_data(v.data(), v.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.push_op(
            "permute",
            &[a],
            Tensor::from_parts(shape, data),
            Box::new(move |args| {
                let (s, d) = permute_data(args.grad.data(), args.grad.shape(), &inverse);
                vec![Some(Tensor::from_parts(s, d))]
            }),
        ))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(shape_err(format!(
                "transpose2 expects rank 2, got {:?}",
                self.shape(a)
            )));
        }
        self.permute(a, &[1, 0])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            sizes.push(s[axis]);
        }
        let (outer, inner) = outer_inner(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_op(
            "concat",
            parts,
            Tensor::from_parts(shape, out),
            Box::new(move |args| {
                let g = args.grad.data();
                let mut grads: Vec<Vec<f64>> = sizes
                    .iter()
                    .map(|&sz| Vec::with_capacity(outer * sz * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &sz) in grads.iter_mut().zip(&sizes) {
                        gi.extend_from_slice(&g[off..off + sz * inner]);
                        off += sz * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(args.inputs)
                    .map(|(gi, x)| Some(Tensor::from_parts(x.shape().to_vec(), gi)))
                    .collect()
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(format!(
                "narrow axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let ext = shape[axis];
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        Ok(self.push_op(
            "narrow",
            &[a],
            Tensor::from_parts(oshape, out),
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gi = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), gi))]
            }),
        ))
    }

    /// Selects rows (axis-0 entries) by index; repeated indices accumulate
    /// in the backward pass.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if idx.is_empty() {
            return Err(shape_err("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(shape_err(format!(
                "gather_rows index {bad} out of range for {shape:?}"
            )));
        }
        let inner = numel(&shape[1..]);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[0] = idx.len();
        let idx = idx.to_vec();
        Ok(self.push_op(
            "gather_rows",
            &[a],
            Tensor::from_parts(oshape, out),
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gi = vec![0.0; numel(&shape)];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..inner {
                        gi[i * inner + k] += g[r * inner + k];
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gi))]
            }),
        ))
    }

    pub fn space_to_depth(&mut self, a: Var, s: usize) -> Result<Var> {
        let out = space_to_depth_data(self.value(a), s)?;
        Ok(self.push_op(
            "space_to_depth",
            &[a],
            out,
            Box::new(move |args| vec![Some(depth_to_space_data(args.grad, s).expect("valid"))]),
        ))
    }

    pub fn depth_to_space(&mut self, a: Var, s: usize) -> Result<Var> {
        let out = depth_to_space_data(self.value(a), s)?;
        Ok(self.push_op(
            "depth_to_space",
            &[a],
            out,
            Box::new(move |args| vec![Some(space_to_depth_data(args.grad, s).expect("valid"))]),
        ))
    }

    pub fn upsample_nearest(&mut self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(shape_err("upsample factor must be positive"));
        }
        let out = upsample_nearest_data(self.value(a), k)?;
        Ok(self.push_op(
            "upsample_nearest",
            &[a],
            out,
            Box::new(move |args| vec![Some(block_sum(args.grad, k))]),
        ))
    }
}
