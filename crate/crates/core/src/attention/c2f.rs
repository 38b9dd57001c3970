use crate::attention::shsa::ShsaParams;
use crate::error::{shape_err, Result};
use crate::params::{Activation, Binding, ConvParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3×3 convolutions with a residual shortcut.
    Plain,
    /// Split attention.
    Shsa,
}

#[derive(Clone, Debug)]
pub enum Bottleneck {
    Plain {
        conv1: ConvParams,
        conv2: ConvParams,
    },
    Shsa(ShsaParams),
}

impl Bottleneck {
    fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, act: Activation) -> Result<Var> {
        match self {
            Bottleneck::Plain { conv1, conv2 } => {
                let y = conv1.forward(tape, params, x)?;
                let y = act.apply(tape, y);
                let y = conv2.forward(tape, params, y)?;
                let y = act.apply(tape, y);
                tape.add(y, x)
            }
            Bottleneck::Shsa(p) => p.forward(tape, params, x),
        }
    }
}

/// Cross-stage-partial block: entry 1×1 → split in halves → chain `n`
/// bottlenecks on the second half keeping every intermediate → concatenate
/// `[half1, half2, b1, …, bn]` → exit 1×1.
#[derive(Clone, Debug)]
pub struct C2fParams {
    pub entry: ConvParams,
    pub exit: ConvParams,
    pub blocks: Vec<Bottleneck>,
    pub hidden: usize,
    pub act: Activation,
}

impl C2fParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        hidden: usize,
        n: usize,
        kind: BlockKind,
        act: Activation,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(shape_err(format!("{name}: hidden width must be positive")));
        }
        let entry = ConvParams::new(
            store,
            &format!("{name}.entry"),
            c_in,
            2 * hidden,
            1,
            1,
            true,
        )?;
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let bname = format!("{name}.block{i}");
            blocks.push(match kind {
                BlockKind::Plain => Bottleneck::Plain {
                    conv1: ConvParams::new(
                        store,
                        &format!("{bname}.conv1"),
                        hidden,
                        hidden,
                        3,
                        1,
                        true,
                    )?,
                    conv2: ConvParams::new(
                        store,
                        &format!("{bname}.conv2"),
                        hidden,
                        hidden,
                        3,
                        1,
                        true,
                    )?,
                },
                BlockKind::Shsa => Bottleneck::Shsa(ShsaParams::new(store, &bname, hidden, None)?),
            });
        }
        let exit = ConvParams::new(
            store,
            &format!("{name}.exit"),
            (2 + n) * hidden,
            c_out,
            1,
            1,
            true,
        )?;
        Ok(C2fParams {
            entry,
            exit,
            blocks,
            hidden,
            act,
        })
    }

    /// The spatial hierarchical attention block: C2f topology with one split
    /// attention bottleneck and hidden width `C/2`.
    pub fn shab(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        act: Activation,
    ) -> Result<Self> {
        C2fParams::new(
            store,
            name,
            channels,
            channels,
            channels / 2,
            1,
            BlockKind::Shsa,
            act,
        )
    }

    pub fn concat_width(&self) -> usize {
        (2 + self.blocks.len()) * self.hidden
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let e = self.entry.forward(tape, params, x)?;
        let e = self.act.apply(tape, e);
        let first = tape.narrow(e, 0, 0, self.hidden)?;
        let mut cur = tape.narrow(e, 0, self.hidden, self.hidden)?;
        let mut outs = vec![first, cur];
        for b in &self.blocks {
            cur = b.forward(tape, params, cur, self.act)?;
            outs.push(cur);
        }
        let cat = tape.concat(&outs, 0)?;
        let y = self.exit.forward(tape, params, cat)?;
        Ok(self.act.apply(tape, y))
    }
}

pub fn c2f_forward(x: &Tensor, p: &C2fParams, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &params, xv)?;
    Ok(tape.value(y).clone())
}

/// [`c2f_forward`] for a block built with [`C2fParams::shab`].
pub fn shab_forward(x: &Tensor, p: &C2fParams, store: &ParamStore) -> Result<Tensor> {
    c2f_forward(x, p, store)
}
