//! 2D cross-correlation ("convolution" in the deep-learning sense) and a
//! fixed-kernel depthwise 3×3 stencil.

use crate::error::{shape_err, Result};
use crate::ops::linalg::gemm_acc;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Validates a single-image geometry.
    pub fn new(input: [usize; 3], weight: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
        let [c_in, h, w] = input;
        let &[c_out, wc_in, kh, kw] = weight else {
            return Err(shape_err(format!(
                "conv2d weight must be [C_out,C_in,kH,kW], got {weight:?}"
            )));
        };
        if wc_in != c_in {
            return Err(shape_err(format!(
                "conv2d: input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}×{kw} must have odd extents"
            )));
        }
        if stride == 0 {
            return Err(shape_err("conv2d: stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(format!(
                "conv2d: padded input {}×{} smaller than kernel {kh}×{kw} (zero-size output)",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Output column range `[lo, hi)` whose input column `ox·s + kx − pad`
    /// stays inside the image.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // ox·s + off ≥ 0  and  ox·s + off ≤ extent − 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (extent as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_extent as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Lowered input `[C_in·kH·kW, Ho·Wo]`; out-of-image taps are zero.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut col = vec![0.0; g.c_in * g.kh * g.kw * plane];
    for ci in 0..g.c_in {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[r * plane..(r + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        drow[ox] = xrow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `gx`.
fn col2im(col: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c_in {
        let gxin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[r * plane..(r + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let grow = &mut gxin[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        grow[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn taps(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Forward kernel for one image.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.c_out * plane];
    if let Some(b) = b {
        for (co, o) in out.chunks_exact_mut(plane).enumerate() {
            o.fill(b[co]);
        }
    }
    let lowered;
    let col = if g.is_pointwise() {
        x
    } else {
        lowered = im2col(x, g);
        &lowered
    };
    gemm_acc(w, col, &mut out, g.c_out, g.taps(), plane, false, false);
    out
}

/// Backward kernel for one image; accumulates into the provided buffers.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &ConvGeom,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let plane = g.ho * g.wo;
    let taps = g.taps();
    if let Some(gb) = gb {
        for co in 0..g.c_out {
            gb[co] += grad[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    if let Some(gw) = gw {
        // gw[co, r] = Σ_p grad[co, p] · col[r, p], computed against colᵀ so
        // the inner loop runs over contiguous taps
        let lowered;
        let col = if g.is_pointwise() {
            x
        } else {
            lowered = im2col(x, g);
            &lowered
        };
        let mut col_t = vec![0.0; plane * taps];
        for r in 0..taps {
            for p in 0..plane {
                col_t[p * taps + r] = col[r * plane + p];
            }
        }
        gemm_acc(grad, &col_t, gw, g.c_out, plane, taps, false, false);
    }
    if let Some(gx) = gx {
        if g.is_pointwise() {
            gemm_acc(w, grad, gx, taps, g.c_out, plane, true, false);
        } else {
            let mut gcol = vec![0.0; taps * plane];
            gemm_acc(w, grad, &mut gcol, taps, g.c_out, plane, true, false);
            col2im(&gcol, g, gx);
        }
    }
}

impl Tape {
    /// Convolution of `[C_in,H,W]` or `[N,C_in,H,W]` input with a
    /// `[C_out,C_in,kH,kW]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let (batch, chw, batched) = match ishape.as_slice() {
            &[c, h, w] => (1, [c, h, w], false),
            &[n, c, h, w] => (n, [c, h, w], true),
            s => {
                return Err(shape_err(format!(
                    "conv2d input must be rank 3 or 4, got {s:?}"
                )))
            }
        };
        let geom = ConvGeom::new(chw, self.shape(weight), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(shape_err(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geom.c_out,
                    self.shape(b)
                )));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = bias.map(|b| self.value(b).data());
        let in_sz = geom.c_in * geom.h * geom.w;
        let out_sz = geom.c_out * geom.ho * geom.wo;
        let mut out = Vec::with_capacity(batch * out_sz);
        for n in 0..batch {
            out.extend(conv2d_forward(&x[n * in_sz..(n + 1) * in_sz], w, b, &geom));
        }
        let oshape = if batched {
            vec![batch, geom.c_out, geom.ho, geom.wo]
        } else {
            vec![geom.c_out, geom.ho, geom.wo]
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_op(
            "conv2d",
            &inputs,
            Tensor::from_parts(oshape, out),
            Box::new(move |args| {
                let x = args.inputs[0].data();
                let w = args.inputs[1].data();
                let g = args.grad.data();
                let mut gx = args.needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = args.needs[1].then(|| vec![0.0; w.len()]);
                let has_bias = args.inputs.len() == 3;
                let mut gb = (has_bias && args.needs[2]).then(|| vec![0.0; geom.c_out]);
                for n in 0..batch {
                    conv2d_backward(
                        &x[n * in_sz..(n + 1) * in_sz],
                        w,
                        &g[n * out_sz..(n + 1) * out_sz],
                        &geom,
                        gx.as_mut().map(|v| &mut v[n * in_sz..(n + 1) * in_sz]),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                let mut res = vec![
                    gx.map(|v| Tensor::from_parts(args.inputs[0].shape().to_vec(), v)),
                    gw.map(|v| Tensor::from_parts(args.inputs[1].shape().to_vec(), v)),
                ];
                if has_bias {
                    res.push(gb.map(|v| Tensor::from_parts(vec![geom.c_out], v)));
                }
                res
            }),
        ))
    }

    /// Per-channel 3×3 cross-correlation with a constant kernel, zero padding 1.
    /// Only the input receives a gradient.
    pub fn depthwise_fixed3x3(&mut self, input: Var, kernel: [[f64; 3]; 3]) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(shape_err(format!(
                "depthwise_fixed3x3 expects [C,H,W], got {:?}",
                self.shape(input)
            )));
        };
        let out = stencil3x3(self.value(input).data(), c, h, w, &kernel, false);
        Ok(self.push_op(
            "depthwise_fixed3x3",
            &[input],
            Tensor::from_parts(vec![c, h, w], out),
            Box::new(move |args| {
                vec![Some(Tensor::from_parts(
                    vec![c, h, w],
                    stencil3x3(args.grad.data(), c, h, w, &kernel, true),
                ))]
            }),
        ))
    }
}

/// Same-size 3×3 stencil with zero padding. `adjoint` applies the transpose
/// map (scatter instead of gather).
fn stencil3x3(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: &[[f64; 3]; 3],
    adjoint: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ky, krow) in k.iter().enumerate() {
                    for (kx, &kv) in krow.iter().enumerate() {
                        // gather reads x[i+ky-1, j+kx-1]; the adjoint reads x[i-ky+1, j-kx+1]
                        let (yi, xj) = if adjoint {
                            (i as isize - ky as isize + 1, j as isize - kx as isize + 1)
                        } else {
                            (i as isize + ky as isize - 1, j as isize + kx as isize - 1)
                        };
                        if yi >= 0 && (yi as usize) < h && xj >= 0 && (xj as usize) < w {
                            acc += kv * x[base + yi as usize * w + xj as usize];
                        }
                    }
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_on_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[1, 4, 5], |i| (i as f64).sin());
        let x = tape.leaf(xt.clone());
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn output_extent_formula() {
        for (h, k, s, p) in [
            (7, 3, 2, 1),
            (8, 3, 2, 1),
            (5, 5, 1, 0),
            (6, 1, 3, 0),
            (4, 3, 3, 2),
        ] {
            let g = ConvGeom::new([1, h, h], &[1, 1, k, k], s, p).unwrap();
            assert_eq!(g.ho, (h + 2 * p - k) / s + 1);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ConvGeom::new([2, 5, 5], &[1, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeom::new([2, 5, 5], &[1, 2, 2, 2], 1, 1).is_err());
        assert!(ConvGeom::new([2, 1, 1], &[1, 2, 5, 5], 1, 0).is_err());
    }

    #[test]
    fn stencil_adjoint_is_transpose() {
        let k = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let (c, h, w) = (2, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.11).sin()).collect();
        let ax = stencil3x3(&x, c, h, w, &k, false);
        let aty = stencil3x3(&y, c, h, w, &k, true);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
