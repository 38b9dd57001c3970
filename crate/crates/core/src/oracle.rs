//! Direct reference kernels.
//!
//! Every function here is written as the textbook loop nest, shares no code
//! with the tape ops, and is slow on purpose. They back the golden fixtures
//! and the equivalence tests.

use std::f64::consts::PI;

use crate::cfsb::{CfsbParams, SCHARR_X, SCHARR_Y};
use crate::params::{Activation, ConvParams, ParamStore};
use crate::tensor::Tensor;

fn dims3(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "oracle expects [C,H,W], got {s:?}");
    (s[0], s[1], s[2])
}

/// Cross-correlation with zero padding, weight `[O, C, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = dims3(x);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    assert_eq!(w.shape()[1], c);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (i * stride + ky) as isize - pad as isize;
                            let xx = (j * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[oc, ic, ky, kx]) * x.at(&[ic, y as usize, xx as usize]);
                        }
                    }
                }
                out[(oc * ho + i) * wo + j] = acc;
            }
        }
    }
    Tensor::new(vec![o, ho, wo], out).expect("shape")
}

pub fn conv(x: &Tensor, p: &ConvParams, store: &ParamStore) -> Tensor {
    let b = p.bias.map(|b| store.get(b));
    conv2d(x, store.get(p.weight), b, p.stride, p.pad)
}

pub fn activation(x: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => x.clone(),
        Activation::Silu => x.map(|v| v / (1.0 + (-v).exp())),
    }
}

/// Unit complex exponential `e^{sign·2πi(uy/H + vx/W)}` with the integer
/// products reduced first so large indices keep full accuracy.
fn twiddle(u: usize, y: usize, h: usize, v: usize, x: usize, w: usize, sign: f64) -> (f64, f64) {
    let a = ((u * y) % h) as f64 / h as f64 + ((v * x) % w) as f64 / w as f64;
    let theta = sign * 2.0 * PI * a;
    (theta.cos(), theta.sin())
}

/// Full double-sum forward DFT, unnormalized. Returns `(real, imag)`.
pub fn dft2(x: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = dims3(x);
    let mut re = vec![0.0; c * h * w];
    let mut im = vec![0.0; c * h * w];
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let (cr, ci) = twiddle(u, y, h, v, xx, w, -1.0);
                        let val = x.at(&[ch, y, xx]);
                        sr += val * cr;
                        si += val * ci;
                    }
                }
                re[(ch * h + u) * w + v] = sr;
                im[(ch * h + u) * w + v] = si;
            }
        }
    }
    let shape = vec![c, h, w];
    (
        Tensor::new(shape.clone(), re).unwrap(),
        Tensor::new(shape, im).unwrap(),
    )
}

/// Full double-sum inverse DFT with `1/(HW)`, real part only.
pub fn idft2(re: &Tensor, im: &Tensor) -> Tensor {
    let (c, h, w) = dims3(re);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let (cr, ci) = twiddle(u, y, h, v, xx, w, 1.0);
                        acc += re.at(&[ch, u, v]) * cr - im.at(&[ch, u, v]) * ci;
                    }
                }
                out[(ch * h + y) * w + xx] = acc / (h * w) as f64;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Per-channel `Gx * x + Gy * x` with zero padding.
pub fn scharr(x: &Tensor) -> Tensor {
    let (c, h, w) = dims3(x);
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
        let mut acc = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                let (y, xx) = (i as isize + dy as isize - 1, j as isize + dx as isize - 1);
                if y >= 0 && xx >= 0 && y < h as isize && xx < w as isize {
                    acc += (SCHARR_X[dy][dx] + SCHARR_Y[dy][dx])
                        * x.at(&[ch, y as usize, xx as usize]);
                }
            }
        }
        acc
    })
}

/// Bilinear read of every channel at pixel coordinates `(x, y)`; corners off
/// the map read as zero.
pub fn bilinear(feature: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = dims3(feature);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let read = |ch: usize, yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            feature.at(&[ch, yy as usize, xx as usize])
        }
    };
    (0..c)
        .map(|ch| {
            read(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                + read(ch, y0, x0 + 1.0) * fx * (1.0 - fy)
                + read(ch, y0 + 1.0, x0) * (1.0 - fx) * fy
                + read(ch, y0 + 1.0, x0 + 1.0) * fx * fy
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i])
        .collect()
}

/// Spatial branch `conv2(conv1(scharr(x)) + x)`.
pub fn cfsb_spatial(x: &Tensor, p: &CfsbParams, store: &ParamStore) -> Tensor {
    let g = scharr(x);
    let c1 = activation(&conv(&g, &p.spatial_conv1, store), p.act);
    let r = c1.add(x).unwrap();
    activation(&conv(&r, &p.spatial_conv2, store), p.act)
}

/// Frequency branch `outer(idft(mask(dft(x))))`.
pub fn cfsb_freq(x: &Tensor, p: &CfsbParams, store: &ParamStore) -> Tensor {
    let (c, _, _) = dims3(x);
    let (re, im) = dft2(x);
    let stacked = Tensor::cat0(&[&re, &im]).unwrap();
    let filtered = conv(&stacked, &p.freq.filter.mask, store);
    let fre = filtered.narrow0(0, c).unwrap();
    let fim = filtered.narrow0(c, c).unwrap();
    let spatial = idft2(&fre, &fim);
    activation(&conv(&spatial, &p.freq.outer, store), p.act)
}

/// `fuse(spatial + freq)`.
pub fn cfsb(x: &Tensor, p: &CfsbParams, store: &ParamStore) -> Tensor {
    let s = cfsb_spatial(x, p, store)
        .add(&cfsb_freq(x, p, store))
        .unwrap();
    activation(&conv(&s, &p.fuse, store), p.act)
}
