//! Bilinear sampling at fractional pixel coordinates.
//!
//! Points are `(x, y)` in pixel units: `x` indexes columns, `y` rows, and an
//! integer point lands exactly on a lattice value. Corners that fall outside
//! the map contribute zero (zero-padding semantics), so the map is continuous
//! across the border and gradients stay defined there.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The four corners around a point with their interpolation weights.
/// Out-of-range corners are reported as `None`.
#[derive(Debug, Clone, Copy)]
pub struct Corners {
    pub x0: isize,
    pub y0: isize,
    pub fx: f64,
    pub fy: f64,
}

impl Corners {
    pub fn new(x: f64, y: f64) -> Corners {
        let (xf, yf) = (x.floor(), y.floor());
        Corners {
            x0: xf as isize,
            y0: yf as isize,
            fx: x - xf,
            fy: y - yf,
        }
    }

    /// `(flat spatial index, weight, ∂weight/∂x, ∂weight/∂y)` for in-bounds corners.
    pub fn taps(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, f64, f64, f64)> {
        let (fx, fy) = (self.fx, self.fy);
        let cands = [
            (
                self.x0,
                self.y0,
                (1.0 - fx) * (1.0 - fy),
                -(1.0 - fy),
                -(1.0 - fx),
            ),
            (self.x0 + 1, self.y0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (self.x0, self.y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (self.x0 + 1, self.y0 + 1, fx * fy, fy, fx),
        ];
        cands.into_iter().filter_map(move |(cx, cy, wgt, dx, dy)| {
            (cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h)
                .then(|| (cy as usize * w + cx as usize, wgt, dx, dy))
        })
    }
}

fn sample_dims(feature: &Tensor, points: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (feature.shape(), points.shape()) {
        (&[c, h, w], &[q, 2]) => Ok((c, h, w, q)),
        (f, p) => Err(shape_err(format!(
            "bilinear_sample expects feature [C,H,W] and points [Q,2], got {f:?} and {p:?}"
        ))),
    }
}

/// Forward kernel: `[C,H,W]` × `[Q,2]` → `[Q,C]`.
pub fn bilinear_sample_data(feature: &Tensor, points: &Tensor) -> Result<Tensor> {
    let (c, h, w, q) = sample_dims(feature, points)?;
    let (f, p) = (feature.data(), points.data());
    let mut out = vec![0.0; q * c];
    for qi in 0..q {
        let corners = Corners::new(p[2 * qi], p[2 * qi + 1]);
        for (idx, wgt, _, _) in corners.taps(h, w) {
            for ch in 0..c {
                out[qi * c + ch] += wgt * f[ch * h * w + idx];
            }
        }
    }
    Ok(Tensor::from_parts(vec![q, c], out))
}

impl Tape {
    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let out = bilinear_sample_data(self.value(feature), self.value(points))?;
        let (c, h, w, q) = sample_dims(self.value(feature), self.value(points))?;
        Ok(self.push_op(
            "bilinear_sample",
            &[feature, points],
            out,
            Box::new(move |args| {
                let (f, p, g) = (
                    args.inputs[0].data(),
                    args.inputs[1].data(),
                    args.grad.data(),
                );
                let mut gf = vec![0.0; c * h * w];
                let mut gp = vec![0.0; q * 2];
                for qi in 0..q {
                    let corners = Corners::new(p[2 * qi], p[2 * qi + 1]);
                    let grow = &g[qi * c..(qi + 1) * c];
                    for (idx, wgt, dwx, dwy) in corners.taps(h, w) {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            gf[ch * h * w + idx] += wgt * grow[ch];
                            dot += grow[ch] * f[ch * h * w + idx];
                        }
                        gp[2 * qi] += dwx * dot;
                        gp[2 * qi + 1] += dwy * dot;
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![c, h, w], gf)),
                    Some(Tensor::from_parts(vec![q, 2], gp)),
                ]
            }),
        ))
    }
}
