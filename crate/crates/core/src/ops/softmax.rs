use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

/// Max-subtracted softmax along `axis`.
pub fn softmax_data(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(shape_err(format!(
            "softmax axis {axis} out of range for {shape:?}"
        )));
    }
    let (outer, len, inner) = (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    );
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len)
                .map(|k| xd[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (xd[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

impl Tape {
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_data(self.value(a), axis)?;
        let shape = out.shape().to_vec();
        let (outer, len, inner) = (
            numel(&shape[..axis]),
            shape[axis],
            numel(&shape[axis + 1..]),
        );
        Ok(self.push_op(
            "softmax",
            &[a],
            out,
            Box::new(move |args| {
                let (y, g) = (args.output.data(), args.grad.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            }),
        ))
    }
}
