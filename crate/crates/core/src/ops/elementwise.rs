use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast_kind(a: &Tensor, b: &Tensor, what: &str) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if a.is_scalar() {
        Ok(Bcast::LeftScalar)
    } else if b.is_scalar() {
        Ok(Bcast::RightScalar)
    } else {
        Err(shape_err(format!(
            "{what}: shapes {:?} and {:?} differ (only scalar broadcasting is supported)",
            a.shape(),
            b.shape()
        )))
    }
}

fn apply(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match kind {
        Bcast::Same => Tensor::from_parts(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        ),
        Bcast::LeftScalar => {
            let s = a.item();
            b.map(|y| f(s, y))
        }
        Bcast::RightScalar => {
            let s = b.item();
            a.map(|x| f(x, s))
        }
    }
}

/// Reduces a full-size gradient to the operand's shape (sums when the operand
/// was a broadcast scalar).
fn reduce_to(g: Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(va, vb, "add")?;
        let out = apply(va, vb, kind, |x, y| x + y);
        Ok(self.push_op(
            "add",
            &[a, b],
            out,
            Box::new(|args| {
                vec![
                    Some(reduce_to(args.grad.clone(), args.inputs[0])),
                    Some(reduce_to(args.grad.clone(), args.inputs[1])),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(va, vb, "sub")?;
        let out = apply(va, vb, kind, |x, y| x - y);
        Ok(self.push_op(
            "sub",
            &[a, b],
            out,
            Box::new(|args| {
                vec![
                    Some(reduce_to(args.grad.clone(), args.inputs[0])),
                    Some(reduce_to(args.grad.scale(-1.0), args.inputs[1])),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(va, vb, "mul")?;
        let out = apply(va, vb, kind, |x, y| x * y);
        Ok(self.push_op(
            "mul",
            &[a, b],
            out,
            Box::new(move |args| {
                let (x, y) = (args.inputs[0], args.inputs[1]);
                let gx = apply(args.grad, y, broadcast_for_grad(kind, false), |g, y| g * y);
                let gy = apply(args.grad, x, broadcast_for_grad(kind, true), |g, x| g * x);
                vec![Some(reduce_to(gx, x)), Some(reduce_to(gy, y))]
            }),
        ))
    }

    /// Sums several same-shape tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let mut it = parts.iter();
        let mut acc = *it.next().ok_or_else(|| shape_err("add_n of zero terms"))?;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push_op(
            "scale",
            &[a],
            out,
            Box::new(move |args| vec![Some(args.grad.scale(s))]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push_op(
            "add_scalar",
            &[a],
            out,
            Box::new(|args| vec![Some(args.grad.clone())]),
        )
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(a).add(c)?;
        Ok(self.push_op(
            "add_const",
            &[a],
            out,
            Box::new(|args| vec![Some(args.grad.clone())]),
        ))
    }

    /// `a ∘ c` for a constant tensor `c` of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(a).mul(c)?;
        let c = c.clone();
        Ok(self.push_op(
            "mul_const",
            &[a],
            out,
            Box::new(move |args| vec![Some(args.grad.mul(&c).expect("shape checked"))]),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(
            "sigmoid",
            &[a],
            out,
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(args.output, |g, y| g * y * (1.0 - y))
                        .expect("same shape"),
                )]
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push_op(
            "silu",
            &[a],
            out,
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(args.inputs[0], |g, x| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .expect("same shape"),
                )]
            }),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(
            "sum",
            &[a],
            out,
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ a ∘ w` for a constant weight tensor.
    pub fn dot_const(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        let va = self.value(a);
        va.expect_same_shape(w, "dot_const")?;
        let out = Tensor::scalar(va.data().iter().zip(w.data()).map(|(x, y)| x * y).sum());
        let w = w.clone();
        Ok(self.push_op(
            "dot_const",
            &[a],
            out,
            Box::new(move |args| vec![Some(w.scale(args.grad.item()))]),
        ))
    }
}

fn broadcast_for_grad(kind: Bcast, for_right: bool) -> Bcast {
    // grad has the output (full) shape; the partner operand may be a scalar.
    match (kind, for_right) {
        (Bcast::Same, _) => Bcast::Same,
        (Bcast::LeftScalar, false) => Bcast::Same,
        (Bcast::LeftScalar, true) => Bcast::RightScalar,
        (Bcast::RightScalar, false) => Bcast::RightScalar,
        (Bcast::RightScalar, true) => Bcast::Same,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
