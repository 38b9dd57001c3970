use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c[m,n] += a[m,k] · b[k,n]` with optional transposes on the operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    for i in 0..m {
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            if trans_b {
                for (j, cj) in row.iter_mut().enumerate() {
                    *cj += av * b[j * k + p];
                }
            } else {
                for (cj, bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cj += av * bj;
                }
            }
        }
    }
}

fn bmm_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Ok((ba, m, k, n)),
        (sa, sb) => Err(shape_err(format!(
            "bmm: incompatible shapes {sa:?} × {sb:?}"
        ))),
    }
}

impl Tape {
    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(shape_err(format!(
                    "matmul: incompatible shapes {sa:?} × {sb:?}"
                )))
            }
        };
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            false,
        );
        Ok(self.push_op(
            "matmul",
            &[a, b],
            Tensor::from_parts(vec![m, n], out),
            Box::new(move |args| {
                let (av, bv, g) = (
                    args.inputs[0].data(),
                    args.inputs[1].data(),
                    args.grad.data(),
                );
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(g, bv, &mut ga, m, n, k, false, true);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(av, g, &mut gb, k, m, n, true, false);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k, n) = bmm_dims(self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bs * m * n];
        for t in 0..bs {
            gemm_acc(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        Ok(self.push_op(
            "bmm",
            &[a, b],
            Tensor::from_parts(vec![bs, m, n], out),
            Box::new(move |args| {
                let (av, bv, g) = (
                    args.inputs[0].data(),
                    args.inputs[1].data(),
                    args.grad.data(),
                );
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for t in 0..bs {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    if args.needs[0] {
                        gemm_acc(
                            gt,
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            true,
                        );
                    }
                    if args.needs[1] {
                        gemm_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            gt,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                            false,
                        );
                    }
                }
                vec![
                    args.needs[0].then(|| Tensor::from_parts(vec![bs, m, k], ga)),
                    args.needs[1].then(|| Tensor::from_parts(vec![bs, k, n], gb)),
                ]
            }),
        ))
    }

    /// Adds a `[d]` bias to every row of an `[N,d]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let (rows, d) = match (sx.as_slice(), sb.as_slice()) {
            (&[r, d], &[d2]) if d == d2 => (r, d),
            _ => return Err(shape_err(format!("add_row_bias: {sx:?} with bias {sb:?}"))),
        };
        let bv = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        Ok(self.push_op(
            "add_row_bias",
            &[x, bias],
            Tensor::from_parts(sx, out),
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                vec![
                    Some(args.grad.clone()),
                    Some(Tensor::from_parts(vec![d], gb)),
                ]
            }),
        ))
    }
}
