use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Layer normalization over the last axis of an `[N,d]` matrix with
    /// affine `gamma`, `beta` of shape `[d]`. Variance is the biased estimate.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let &[rows, d] = sx.as_slice() else {
            return Err(shape_err(format!("layer_norm expects [N,d], got {sx:?}")));
        };
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!(
                "layer_norm affine parameters must be [{d}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let (mu, inv) = moments(row, eps);
            for k in 0..d {
                out[r * d + k] = gd[k] * (row[k] - mu) * inv + bd[k];
            }
        }
        Ok(self.push_op(
            "layer_norm",
            &[x, gamma, beta],
            Tensor::from_parts(sx, out),
            Box::new(move |args| {
                let (xd, gd, g) = (
                    args.inputs[0].data(),
                    args.inputs[1].data(),
                    args.grad.data(),
                );
                let mut gx = vec![0.0; rows * d];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mu, inv) = moments(row, eps);
                    for k in 0..d {
                        xhat[k] = (row[k] - mu) * inv;
                        gxhat[k] = grow[k] * gd[k];
                        ggamma[k] += grow[k] * xhat[k];
                        gbeta[k] += grow[k];
                    }
                    let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                    let mean_gx =
                        gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        gx[r * d + k] = inv * (gxhat[k] - mean_g - xhat[k] * mean_gx);
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![rows, d], gx)),
                    Some(Tensor::from_parts(vec![d], ggamma)),
                    Some(Tensor::from_parts(vec![d], gbeta)),
                ]
            }),
        ))
    }
}

/// Mean and inverse standard deviation of one row.
fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_rows_have_zero_mean_unit_var() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 8], |i| {
            (i as f64 * 1.3).sin() * 5.0 + 2.0
        }));
        let g = tape.leaf(Tensor::ones(&[8]));
        let b = tape.leaf(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        for r in 0..3 {
            let row: Vec<f64> = (0..8).map(|k| v.at(&[r, k])).collect();
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
