//! 2D discrete Fourier transform pair and the learnable frequency filter path.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[u,v] = Σ x[h,w]·exp(−2πi(uh/H + vw/W))`, and the inverse carries the
//! `1/(H·W)` factor. Power-of-two extents use an iterative radix-2 FFT; other
//! extents use direct 1D sums along each axis.
//!
//! On the tape a spectrum of a `[C,H,W]` map is carried as one `[2C,H,W]`
//! tensor: real parts in channels `0..C`, imaginary parts in `C..2C`. That is
//! also the layout the 1×1 filter convolution mixes.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{shape_err, Result};
use crate::params::{Binding, ConvParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
    pub source_extents: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DftPath {
    /// Radix-2 FFT when both extents are powers of two, direct sums otherwise.
    Auto,
    /// Direct 1D sums along each axis regardless of extent.
    Direct,
}

impl Spectrum {
    pub fn new(real: Tensor, imag: Tensor) -> Result<Self> {
        real.expect_same_shape(&imag, "spectrum real/imag")?;
        let &[_, h, w] = real.shape() else {
            return Err(shape_err(format!(
                "spectrum parts must be [C,H,W], got {:?}",
                real.shape()
            )));
        };
        Ok(Spectrum {
            real,
            imag,
            source_extents: (h, w),
        })
    }

    pub fn channels(&self) -> usize {
        self.real.shape()[0]
    }

    /// `[2C,H,W]` stacking of real then imaginary parts.
    pub fn stacked(&self) -> Tensor {
        Tensor::cat0(&[&self.real, &self.imag]).expect("parts share shape")
    }

    pub fn from_stacked(t: &Tensor) -> Result<Self> {
        let &[c2, _, _] = t.shape() else {
            return Err(shape_err(format!(
                "stacked spectrum must be [2C,H,W], got {:?}",
                t.shape()
            )));
        };
        if c2 % 2 != 0 {
            return Err(shape_err(format!(
                "stacked spectrum has odd channel count {c2}"
            )));
        }
        Spectrum::new(t.narrow0(0, c2 / 2)?, t.narrow0(c2 / 2, c2 / 2)?)
    }

    /// Zeroes every bin for which `keep(u, v)` is false.
    pub fn keep_bins(&self, keep: impl Fn(usize, usize) -> bool) -> Spectrum {
        let (h, w) = self.source_extents;
        let mask = |i: usize| {
            let (u, v) = ((i / w) % h, i % w);
            if keep(u, v) {
                1.0
            } else {
                0.0
            }
        };
        let apply = |t: &Tensor| Tensor::from_fn(t.shape(), |i| t.data()[i] * mask(i));
        Spectrum {
            real: apply(&self.real),
            imag: apply(&self.imag),
            source_extents: self.source_extents,
        }
    }

    /// Largest deviation from `X[u,v] = conj(X[−u mod H, −v mod W])`.
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let (h, w) = self.source_extents;
        let mut err: f64 = 0.0;
        for ch in 0..self.channels() {
            for u in 0..h {
                for v in 0..w {
                    let (mu, mv) = ((h - u) % h, (w - v) % w);
                    let a = [ch, u, v];
                    let b = [ch, mu, mv];
                    err = err
                        .max((self.real.at(&a) - self.real.at(&b)).abs())
                        .max((self.imag.at(&a) + self.imag.at(&b)).abs());
                }
            }
        }
        err
    }

    pub fn energy(&self) -> f64 {
        self.real.data().iter().map(|v| v * v).sum::<f64>()
            + self.imag.data().iter().map(|v| v * v).sum::<f64>()
    }
}

/// In-place iterative radix-2 FFT. `inverse` flips the exponent sign; no
/// normalization is applied.
pub fn fft_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    assert!(
        n.is_power_of_two(),
        "radix-2 FFT needs a power-of-two length, got {n}"
    );
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let tw = Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / len as f64);
            for start in (0..n).step_by(len) {
                let a = buf[start + k];
                let b = buf[start + k + half] * tw;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Direct O(n²) 1D transform with twiddle angles reduced modulo `n`.
pub fn dft1_direct(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let src = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &x) in src.iter().enumerate() {
            let phase = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
            acc += x * Complex64::from_polar(1.0, phase);
        }
        *out = acc;
    }
}

fn transform_1d(buf: &mut [Complex64], inverse: bool, path: DftPath) {
    if path == DftPath::Auto && buf.len().is_power_of_two() {
        fft_radix2(buf, inverse);
    } else {
        dft1_direct(buf, inverse);
    }
}

/// Unnormalized 2D transform of each `[H,W]` plane of a complex `[C,H,W]`
/// field given as separate real/imaginary buffers.
fn transform_2d(
    re: &[f64],
    im: Option<&[f64]>,
    c: usize,
    h: usize,
    w: usize,
    inverse: bool,
    path: DftPath,
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut out_re = vec![0.0; c * plane];
    let mut out_im = vec![0.0; c * plane];
    let mut field = vec![Complex64::new(0.0, 0.0); plane];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for ch in 0..c {
        for i in 0..plane {
            let imv = im.map_or(0.0, |m| m[ch * plane + i]);
            field[i] = Complex64::new(re[ch * plane + i], imv);
        }
        for row in field.chunks_exact_mut(w) {
            transform_1d(row, inverse, path);
        }
        for j in 0..w {
            for i in 0..h {
                col[i] = field[i * w + j];
            }
            transform_1d(&mut col, inverse, path);
            for i in 0..h {
                field[i * w + j] = col[i];
            }
        }
        for i in 0..plane {
            out_re[ch * plane + i] = field[i].re;
            out_im[ch * plane + i] = field[i].im;
        }
    }
    (out_re, out_im)
}

fn chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(shape_err(format!("expected [C,H,W], got {s:?}"))),
    }
}

pub fn dft2_with(x: &Tensor, path: DftPath) -> Result<Spectrum> {
    let (c, h, w) = chw(x)?;
    let (re, im) = transform_2d(x.data(), None, c, h, w, false, path);
    Ok(Spectrum {
        real: Tensor::from_parts(vec![c, h, w], re),
        imag: Tensor::from_parts(vec![c, h, w], im),
        source_extents: (h, w),
    })
}

pub fn dft2(x: &Tensor) -> Result<Spectrum> {
    dft2_with(x, DftPath::Auto)
}

/// Real part of the normalized inverse transform. Any imaginary residue
/// (present when the spectrum is not conjugate-symmetric) is dropped.
pub fn idft2_with(s: &Spectrum, path: DftPath) -> Result<Tensor> {
    let (c, h, w) = chw(&s.real)?;
    s.real.expect_same_shape(&s.imag, "idft2")?;
    if (h, w) != s.source_extents {
        return Err(shape_err(format!(
            "idft2: spectrum extents {h}×{w} disagree with source extents {:?}",
            s.source_extents
        )));
    }
    let (re, _) = transform_2d(s.real.data(), Some(s.imag.data()), c, h, w, true, path);
    let norm = 1.0 / (h * w) as f64;
    Ok(Tensor::from_parts(
        vec![c, h, w],
        re.into_iter().map(|v| v * norm).collect(),
    ))
}

pub fn idft2(s: &Spectrum) -> Result<Tensor> {
    idft2_with(s, DftPath::Auto)
}

/// 1×1 mask convolution over the stacked `[2C,H,W]` spectrum.
pub fn freq_filter(s: &Spectrum, weight: &Tensor, bias: &Tensor) -> Result<Spectrum> {
    let stacked = s.stacked();
    let c2 = stacked.shape()[0];
    if weight.shape() != [c2, c2, 1, 1] || bias.shape() != [c2] {
        return Err(shape_err(format!(
            "freq_filter: spectrum with {c2} stacked channels needs weight [{c2},{c2},1,1] and bias [{c2}], got {:?} and {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let mut tape = Tape::new();
    let (x, wv, bv) = (
        tape.constant(stacked),
        tape.constant(weight.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.conv2d(x, wv, Some(bv), 1, 0)?;
    Spectrum::from_stacked(tape.value(y))
}

impl Tape {
    /// Forward DFT of `[C,H,W]`, returned stacked as `[2C,H,W]`.
    pub fn dft2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x))?;
        let s = dft2(self.value(x))?;
        Ok(self.push_op(
            "dft2",
            &[x],
            s.stacked(),
            Box::new(move |args| {
                // adjoint of the forward DFT: Re(unnormalized inverse DFT of the cotangent)
                let g = args.grad.data();
                let plane = c * h * w;
                let (re, _) =
                    transform_2d(&g[..plane], Some(&g[plane..]), c, h, w, true, DftPath::Auto);
                vec![Some(Tensor::from_parts(vec![c, h, w], re))]
            }),
        ))
    }

    /// Real part of the inverse DFT of a stacked `[2C,H,W]` spectrum.
    pub fn idft2(&mut self, s: Var) -> Result<Var> {
        let spec = Spectrum::from_stacked(self.value(s))?;
        let (c, h, w) = chw(&spec.real)?;
        let out = idft2(&spec)?;
        Ok(self.push_op(
            "idft2",
            &[s],
            out,
            Box::new(move |args| {
                let (re, im) = transform_2d(args.grad.data(), None, c, h, w, false, DftPath::Auto);
                let norm = 1.0 / (h * w) as f64;
                let data = re.into_iter().chain(im).map(|v| v * norm).collect();
                vec![Some(Tensor::from_parts(vec![2 * c, h, w], data))]
            }),
        ))
    }
}

/// The learnable mask `M`: a 1×1 convolution `2C → 2C` with bias over the
/// stacked spectrum.
#[derive(Clone, Debug)]
pub struct FreqFilterParams {
    pub mask: ConvParams,
}

impl FreqFilterParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(FreqFilterParams {
            mask: ConvParams::new(
                store,
                &format!("{name}.mask"),
                2 * channels,
                2 * channels,
                1,
                1,
                true,
            )?,
        })
    }

    pub fn channels(&self) -> usize {
        self.mask.c_in / 2
    }

    /// Filters a stacked spectrum variable.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, spectrum: Var) -> Result<Var> {
        let c2 = tape.shape(spectrum)[0];
        if c2 != self.mask.c_in {
            return Err(shape_err(format!(
                "freq filter built for {} stacked channels, got {c2}",
                self.mask.c_in
            )));
        }
        self.mask.forward(tape, params, spectrum)
    }
}

/// Frequency branch: inner spectral mask followed by an outer 1×1 conv.
#[derive(Clone, Debug)]
pub struct FreqBranchParams {
    pub filter: FreqFilterParams,
    pub outer: ConvParams,
}

impl FreqBranchParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(FreqBranchParams {
            filter: FreqFilterParams::new(store, &format!("{name}.filter"), channels)?,
            outer: ConvParams::new(
                store,
                &format!("{name}.outer"),
                channels,
                channels,
                1,
                1,
                true,
            )?,
        })
    }

    /// `outer(idft2(mask(dft2(x))))`.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let spec = tape.dft2(x)?;
        let filtered = self.filter.forward(tape, params, spec)?;
        let back = tape.idft2(filtered)?;
        self.outer.forward(tape, params, back)
    }
}

/// Stand-alone frequency branch on plain tensors.
pub fn cfsb_freq_branch(x: &Tensor, p: &FreqBranchParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let x = Tensor::full(&[1, 4, 6], 2.5);
        let s = dft2(&x).unwrap();
        assert!((s.real.at(&[0, 0, 0]) - 2.5 * 24.0).abs() < 1e-12);
        let rest = s
            .real
            .data()
            .iter()
            .chain(s.imag.data())
            .enumerate()
            .filter(|(i, _)| *i != 0)
            .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
        assert!(rest < 1e-12);
    }

    #[test]
    fn impulse_is_flat() {
        let x = Tensor::from_fn(&[1, 8, 8], |i| if i == 0 { 1.0 } else { 0.0 });
        let s = dft2(&x).unwrap();
        assert!(s.real.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(s.imag.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let (h, w) = (3, 5);
        let re = Tensor::from_fn(
            &[1, h, w],
            |i| if i == 0 { 7.0 * (h * w) as f64 } else { 0.0 },
        );
        let s = Spectrum::new(re, Tensor::zeros(&[1, h, w])).unwrap();
        let x = idft2(&s).unwrap();
        assert!(x.data().iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn fft_matches_direct_1d() {
        let data: Vec<Complex64> = (0..16)
            .map(|i| Complex64::new((i as f64 * 0.3).sin(), (i as f64 * 0.7).cos()))
            .collect();
        let (mut a, mut b) = (data.clone(), data);
        fft_radix2(&mut a, false);
        dft1_direct(&mut b, false);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn stacked_roundtrip() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| (i as f64).cos());
        let s = dft2(&x).unwrap();
        assert_eq!(Spectrum::from_stacked(&s.stacked()).unwrap(), s);
    }

    #[test]
    fn filter_channel_mismatch_rejected() {
        let s = dft2(&Tensor::ones(&[2, 4, 4])).unwrap();
        assert!(freq_filter(&s, &Tensor::zeros(&[2, 2, 1, 1]), &Tensor::zeros(&[2])).is_err());
    }
}
