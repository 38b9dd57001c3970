use crate::error::{shape_err, Result};
use crate::params::{Activation, Binding, ConvParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Multi-branch convolution: `3×3(x) + 1×1(x) [+ x]`. Branches carry biases
/// and no normalization, so the three merge exactly into one 3×3 kernel.
#[derive(Clone, Debug)]
pub struct RepConvParams {
    pub name: String,
    pub branch3x3: ConvParams,
    pub branch1x1: ConvParams,
    pub identity: bool,
    /// Merged single 3×3 convolution, present after [`RepConvParams::deploy`].
    pub deployed: Option<ConvParams>,
}

impl RepConvParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        identity: bool,
    ) -> Result<Self> {
        if identity && (c_in != c_out || stride != 1) {
            return Err(shape_err(format!(
                "{name}: identity branch needs C_in = C_out and stride 1 (got {c_in}→{c_out}, stride {stride})"
            )));
        }
        Ok(RepConvParams {
            name: name.to_string(),
            branch3x3: ConvParams::new(store, &format!("{name}.b3"), c_in, c_out, 3, stride, true)?,
            branch1x1: ConvParams::new(store, &format!("{name}.b1"), c_in, c_out, 1, stride, true)?,
            identity,
            deployed: None,
        })
    }

    pub fn c_out(&self) -> usize {
        self.branch3x3.c_out
    }

    /// Merged `(kernel [C_out,C_in,3,3], bias [C_out])` from the training
    /// branches. Depends only on the branch parameters, so repeated calls
    /// agree.
    pub fn reparameterize(&self, store: &ParamStore) -> (Tensor, Tensor) {
        let (ci, co) = (self.branch3x3.c_in, self.branch3x3.c_out);
        let k3 = store.get(self.branch3x3.weight).data();
        let k1 = store.get(self.branch1x1.weight).data();
        let mut k = k3.to_vec();
        for o in 0..co {
            for i in 0..ci {
                let center = ((o * ci + i) * 3 + 1) * 3 + 1;
                k[center] += k1[o * ci + i];
                if self.identity && o == i {
                    k[center] += 1.0;
                }
            }
        }
        let bias = |c: &ConvParams| {
            c.bias
                .map(|b| store.get(b).clone())
                .unwrap_or_else(|| Tensor::zeros(&[co]))
        };
        let b = bias(&self.branch3x3)
            .add(&bias(&self.branch1x1))
            .expect("matching bias shapes");
        (Tensor::from_parts(vec![co, ci, 3, 3], k), b)
    }

    /// Stores the merged kernel as `<name>.merged.*` and switches
    /// [`RepConvParams::forward`] to the single-convolution path.
    pub fn deploy(&mut self, store: &mut ParamStore) {
        let (k, b) = self.reparameterize(store);
        let weight = store.insert(format!("{}.merged.weight", self.name), k);
        let bias = store.insert(format!("{}.merged.bias", self.name), b);
        let t = &self.branch3x3;
        self.deployed = Some(ConvParams {
            weight,
            bias: Some(bias),
            ..t.clone()
        });
    }

    pub fn forward_training(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let a = self.branch3x3.forward(tape, params, x)?;
        let b = self.branch1x1.forward(tape, params, x)?;
        let s = tape.add(a, b)?;
        if self.identity {
            tape.add(s, x)
        } else {
            Ok(s)
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        match &self.deployed {
            Some(conv) => conv.forward(tape, params, x),
            None => self.forward_training(tape, params, x),
        }
    }
}

pub fn repconv_forward(x: &Tensor, p: &RepConvParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}

/// Two parallel 1×1 entries; one path runs `n` RepConv units; the paths are
/// summed and mapped by a 1×1 exit, skipped when the hidden width already
/// equals `C_out`.
#[derive(Clone, Debug)]
pub struct RepC3Params {
    pub entry1: ConvParams,
    pub entry2: ConvParams,
    pub units: Vec<RepConvParams>,
    pub exit: Option<ConvParams>,
    pub act: Activation,
}

impl RepC3Params {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        hidden: usize,
        n: usize,
        act: Activation,
    ) -> Result<Self> {
        let entry1 = ConvParams::new(store, &format!("{name}.entry1"), c_in, hidden, 1, 1, true)?;
        let entry2 = ConvParams::new(store, &format!("{name}.entry2"), c_in, hidden, 1, 1, true)?;
        let units = (0..n)
            .map(|i| RepConvParams::new(store, &format!("{name}.rep{i}"), hidden, hidden, 1, true))
            .collect::<Result<Vec<_>>>()?;
        let exit = if hidden == c_out {
            None
        } else {
            Some(ConvParams::new(
                store,
                &format!("{name}.exit"),
                hidden,
                c_out,
                1,
                1,
                true,
            )?)
        };
        Ok(RepC3Params {
            entry1,
            entry2,
            units,
            exit,
            act,
        })
    }

    pub fn c_out(&self) -> usize {
        self.exit.as_ref().map_or(self.entry1.c_out, |e| e.c_out)
    }

    pub fn deploy(&mut self, store: &mut ParamStore) {
        for u in &mut self.units {
            u.deploy(store);
        }
    }

    fn run(&self, tape: &mut Tape, params: &Binding, x: Var, training: bool) -> Result<Var> {
        let a = self.entry1.forward(tape, params, x)?;
        let mut a = self.act.apply(tape, a);
        for u in &self.units {
            a = if training {
                u.forward_training(tape, params, a)?
            } else {
                u.forward(tape, params, a)?
            };
            a = self.act.apply(tape, a);
        }
        let b = self.entry2.forward(tape, params, x)?;
        let b = self.act.apply(tape, b);
        let s = tape.add(a, b)?;
        match &self.exit {
            Some(e) => {
                let y = e.forward(tape, params, s)?;
                Ok(self.act.apply(tape, y))
            }
            None => Ok(s),
        }
    }

    /// Uses merged kernels for units that have been deployed.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        self.run(tape, params, x, false)
    }

    /// Always uses the multi-branch form.
    pub fn forward_training(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        self.run(tape, params, x, true)
    }
}

pub fn repc3_forward(x: &Tensor, p: &RepC3Params, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}
