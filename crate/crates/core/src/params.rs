//! Named parameter storage and the small parameterized layers (convolution,
//! linear, layer norm) every block is assembled from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// `U(-1/√fan_in, 1/√fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    Uniform {
        bound: f64,
    },
    /// Value supplied by the caller.
    Provided,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub init: Init,
}

/// Hierarchically named (`"fsfpn.td0.cfsb.fuse.weight"`) learnable tensors.
/// Initialization draws from one seeded stream in registration order, so a
/// store is a pure function of (construction order, seed).
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        let rng = &mut self.rng;
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::KaimingUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-b..b))
            }
            Init::Uniform { bound } => Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)),
            Init::Provided => {
                return Err(Error::InvalidArgument(
                    "use ParamStore::insert for provided values".into(),
                ))
            }
        };
        Ok(self.push(name, value, init))
    }

    /// Inserts or overwrites a parameter with an explicit value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.by_name.get(&name) {
            self.entries[id.0].value = value;
            self.entries[id.0].init = Init::Provided;
            return id;
        }
        self.push(name, value, Init::Provided)
    }

    fn push(&mut self, name: String, value: Tensor, init: Init) -> ParamId {
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, init });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(shape_err(format!(
                "parameter {}: shape {:?} cannot be replaced by {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        cur.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total scalar count over all parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone()))
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.constant(e.value.clone()))
                .collect(),
        }
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }
}

/// Parameter → tape-variable map for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps already-created variables, in parameter-id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, in id order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v).clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Silu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Silu => tape.silu(x),
        }
    }
}

/// A convolution layer: `[C_out, C_in, k, k]` weight, optional bias,
/// "same" padding `k/2`.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(shape_err(format!("{name}: conv channels must be positive")));
        }
        let fan_in = c_in * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            &[c_out, c_in, k, k],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                &[c_out],
                Init::KaimingUniform { fan_in },
            )?)
        } else {
            None
        };
        Ok(ConvParams {
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            params.var(self.weight),
            self.bias.map(|b| params.var(b)),
            self.stride,
            self.pad,
        )
    }

    /// Overwrites the kernel with a channel identity (1×1 or center tap) and
    /// zeroes the bias.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.c_in != self.c_out {
            return Err(shape_err("identity kernel needs C_in = C_out"));
        }
        let (c, k) = (self.c_in, self.k);
        let center = k / 2;
        let w = Tensor::from_fn(&[c, c, k, k], |i| {
            let kx = i % k;
            let ky = (i / k) % k;
            let ci = (i / (k * k)) % c;
            let co = i / (k * k * c);
            if co == ci && ky == center && kx == center {
                1.0
            } else {
                0.0
            }
        });
        store.set(self.weight, w)?;
        if let Some(b) = self.bias {
            store.set(b, Tensor::zeros(&[c]))?;
        }
        Ok(())
    }

    /// Zeroes kernel and bias.
    pub fn set_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.set(
            self.weight,
            Tensor::zeros(&[self.c_out, self.c_in, self.k, self.k]),
        )?;
        if let Some(b) = self.bias {
            store.set(b, Tensor::zeros(&[self.c_out]))?;
        }
        Ok(())
    }
}

/// Dense layer on `[N, d_in]` rows: weight `[d_in, d_out]`, bias `[d_out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let fan_in = d_in;
        Ok(LinearParams {
            weight: store.add(
                format!("{name}.weight"),
                &[d_in, d_out],
                Init::KaimingUniform { fan_in },
            )?,
            bias: store.add(
                format!("{name}.bias"),
                &[d_out],
                Init::KaimingUniform { fan_in },
            )?,
            d_in,
            d_out,
        })
    }

    /// Same as [`LinearParams::new`] with zero-initialized weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(LinearParams {
            weight: store.add(format!("{name}.weight"), &[d_in, d_out], Init::Zeros)?,
            bias: store.add(format!("{name}.bias"), &[d_out], Init::Zeros)?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, params.var(self.weight))?;
        tape.add_row_bias(y, params.var(self.bias))
    }

    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.d_in != self.d_out {
            return Err(shape_err("identity linear map needs d_in = d_out"));
        }
        let d = self.d_in;
        store.set(
            self.weight,
            Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
        )?;
        store.set(self.bias, Tensor::zeros(&[d]))
    }

    pub fn set_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.set(self.weight, Tensor::zeros(&[self.d_in, self.d_out]))?;
        store.set(self.bias, Tensor::zeros(&[self.d_out]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: store.add(format!("{name}.beta"), &[d], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, params.var(self.gamma), params.var(self.beta), self.eps)
    }
}
