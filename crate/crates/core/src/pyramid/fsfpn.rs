use crate::cfsb::CfsbParams;
use crate::error::{shape_err, Result};
use crate::params::{Activation, Binding, ConvParams, ParamStore};
use crate::pyramid::rep::RepC3Params;
use crate::pyramid::resample::{sni, SniVariant, SpdConvParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feature maps ordered from finest to coarsest with their strides.
#[derive(Clone, Debug)]
pub struct PyramidLevels {
    pub maps: Vec<Tensor>,
    pub strides: Vec<usize>,
}

impl PyramidLevels {
    /// Checks that strides double and spatial extents halve level to level.
    pub fn new(maps: Vec<Tensor>, strides: Vec<usize>) -> Result<Self> {
        if maps.is_empty() || maps.len() != strides.len() {
            return Err(shape_err(
                "pyramid needs one stride per level and at least one level",
            ));
        }
        for (m, s) in maps.iter().zip(&strides) {
            if m.rank() != 3 || *s == 0 {
                return Err(shape_err(format!(
                    "pyramid level must be [C,H,W] with positive stride, got {:?}",
                    m.shape()
                )));
            }
        }
        for i in 1..maps.len() {
            let (a, b) = (maps[i - 1].shape(), maps[i].shape());
            if strides[i] != 2 * strides[i - 1] || a[1] != 2 * b[1] || a[2] != 2 * b[2] {
                return Err(shape_err(format!(
                    "levels {} and {i} do not halve: {:?}@{} vs {:?}@{}",
                    i - 1,
                    a,
                    strides[i - 1],
                    b,
                    strides[i]
                )));
            }
        }
        Ok(PyramidLevels { maps, strides })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FsfpnConfig {
    /// Input widths, finest level first.
    pub in_channels: Vec<usize>,
    pub hidden: usize,
    pub repc3_depth: usize,
    /// Frequency-spatial variant when set; otherwise the plain pyramid
    /// (1×1 fusion, nearest upsampling, strided 3×3 downsampling).
    pub frequency_spatial: bool,
    pub sni: SniVariant,
    /// Also fuse bottom-up concatenations with the cross-domain block.
    pub bottom_up_cfsb: bool,
    pub act: Activation,
    /// Activation inside the cross-domain blocks.
    pub cfsb_act: Activation,
}

impl FsfpnConfig {
    pub fn new(in_channels: Vec<usize>, hidden: usize) -> Self {
        FsfpnConfig {
            in_channels,
            hidden,
            repc3_depth: 3,
            frequency_spatial: true,
            sni: SniVariant::Linear,
            bottom_up_cfsb: false,
            act: Activation::Silu,
            cfsb_act: Activation::Identity,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Fuser {
    Cfsb(CfsbParams),
    Plain(ConvParams),
}

impl Fuser {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        cross_domain: bool,
        cfsb_act: Activation,
    ) -> Result<Self> {
        Ok(if cross_domain {
            Fuser::Cfsb(CfsbParams::new(
                store,
                &format!("{name}.cfsb"),
                c,
                cfsb_act,
            )?)
        } else {
            Fuser::Plain(ConvParams::new(
                store,
                &format!("{name}.mix"),
                c,
                c,
                1,
                1,
                true,
            )?)
        })
    }

    fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, act: Activation) -> Result<Var> {
        match self {
            Fuser::Cfsb(p) => p.forward(tape, params, x),
            Fuser::Plain(c) => {
                let y = c.forward(tape, params, x)?;
                Ok(act.apply(tape, y))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Downsampler {
    Spd(SpdConvParams),
    Strided(ConvParams),
}

impl Downsampler {
    fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        match self {
            Downsampler::Spd(p) => p.forward(tape, params, x),
            Downsampler::Strided(c) => c.forward(tape, params, x),
        }
    }
}

/// Top-down then bottom-up fusion over `L` levels.
///
/// ```text
/// lat_i = 1×1(P_i)
/// td_L  = RepC3(F(lat_L))
/// td_i  = RepC3(F([lat_i, up(td_{i+1})]))
/// out_0 = td_0
/// out_i = RepC3([td_i, down(out_{i-1})])
/// ```
///
/// `F` is the cross-domain block (or a 1×1 conv), `up` is soft nearest
/// upsampling (or plain nearest) and `down` is SPDConv (or a strided conv).
#[derive(Clone, Debug)]
pub struct FsfpnParams {
    pub cfg: FsfpnConfig,
    pub laterals: Vec<ConvParams>,
    pub td_fuse: Vec<Fuser>,
    pub td_rep: Vec<RepC3Params>,
    /// Index `i - 1` feeds bottom-up level `i`.
    pub down: Vec<Downsampler>,
    pub bu_fuse: Vec<Option<Fuser>>,
    pub bu_rep: Vec<RepC3Params>,
}

impl FsfpnParams {
    pub fn new(store: &mut ParamStore, name: &str, cfg: FsfpnConfig) -> Result<Self> {
        let n = cfg.in_channels.len();
        if n == 0 || cfg.hidden == 0 {
            return Err(shape_err(format!(
                "{name}: need at least one level and a positive hidden width"
            )));
        }
        let (h, act, fs) = (cfg.hidden, cfg.act, cfg.frequency_spatial);
        let cact = cfg.cfsb_act;
        let mut laterals = Vec::with_capacity(n);
        for (i, &c) in cfg.in_channels.iter().enumerate() {
            laterals.push(ConvParams::new(
                store,
                &format!("{name}.lat{i}"),
                c,
                h,
                1,
                1,
                true,
            )?);
        }
        let (mut td_fuse, mut td_rep) = (Vec::new(), Vec::new());
        for i in 0..n {
            let width = if i == n - 1 { h } else { 2 * h };
            td_fuse.push(Fuser::new(
                store,
                &format!("{name}.td{i}"),
                width,
                fs,
                cact,
            )?);
            td_rep.push(RepC3Params::new(
                store,
                &format!("{name}.td{i}.rep"),
                width,
                h,
                h,
                cfg.repc3_depth,
                act,
            )?);
        }
        let (mut down, mut bu_fuse, mut bu_rep) = (Vec::new(), Vec::new(), Vec::new());
        for i in 1..n {
            let dname = format!("{name}.down{i}");
            down.push(if fs {
                Downsampler::Spd(SpdConvParams::new(store, &dname, h, h)?)
            } else {
                Downsampler::Strided(ConvParams::new(
                    store,
                    &format!("{dname}.conv"),
                    h,
                    h,
                    3,
                    2,
                    true,
                )?)
            });
            bu_fuse.push(if fs && cfg.bottom_up_cfsb {
                Some(Fuser::new(
                    store,
                    &format!("{name}.bu{i}"),
                    2 * h,
                    true,
                    cact,
                )?)
            } else {
                None
            });
            bu_rep.push(RepC3Params::new(
                store,
                &format!("{name}.bu{i}.rep"),
                2 * h,
                h,
                h,
                cfg.repc3_depth,
                act,
            )?);
        }
        Ok(FsfpnParams {
            cfg,
            laterals,
            td_fuse,
            td_rep,
            down,
            bu_fuse,
            bu_rep,
        })
    }

    pub fn deploy(&mut self, store: &mut ParamStore) {
        for r in self.td_rep.iter_mut().chain(self.bu_rep.iter_mut()) {
            r.deploy(store);
        }
    }

    /// `levels` finest first; returns fused maps of width `hidden`, finest first.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, levels: &[Var]) -> Result<Vec<Var>> {
        let n = self.laterals.len();
        if levels.len() != n {
            return Err(shape_err(format!(
                "pyramid built for {n} levels, got {}",
                levels.len()
            )));
        }
        let act = self.cfg.act;
        let up_variant = if self.cfg.frequency_spatial {
            self.cfg.sni
        } else {
            SniVariant::Nearest
        };

        let mut lat = Vec::with_capacity(n);
        for (conv, &x) in self.laterals.iter().zip(levels) {
            let y = conv.forward(tape, params, x)?;
            lat.push(act.apply(tape, y));
        }

        let mut td = vec![lat[n - 1]; n];
        let top = self.td_fuse[n - 1].forward(tape, params, lat[n - 1], act)?;
        td[n - 1] = self.td_rep[n - 1].forward(tape, params, top)?;
        for i in (0..n - 1).rev() {
            let s = tape.shape(lat[i]);
            let target = (s[1], s[2]);
            let up = sni(tape, td[i + 1], target, up_variant)?;
            let cat = tape.concat(&[lat[i], up], 0)?;
            let fused = self.td_fuse[i].forward(tape, params, cat, act)?;
            td[i] = self.td_rep[i].forward(tape, params, fused)?;
        }

        let mut out = vec![td[0]; n];
        for i in 1..n {
            let d = self.down[i - 1].forward(tape, params, out[i - 1])?;
            let d = act.apply(tape, d);
            let mut cat = tape.concat(&[td[i], d], 0)?;
            if let Some(f) = &self.bu_fuse[i - 1] {
                cat = f.forward(tape, params, cat, act)?;
            }
            out[i] = self.bu_rep[i - 1].forward(tape, params, cat)?;
        }
        Ok(out)
    }
}

pub fn fsfpn_forward(
    levels: &PyramidLevels,
    p: &FsfpnParams,
    store: &ParamStore,
) -> Result<PyramidLevels> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let vars: Vec<Var> = levels
        .maps
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let out = p.forward(&mut tape, &params, &vars)?;
    let maps = out.into_iter().map(|v| tape.value(v).clone()).collect();
    PyramidLevels::new(maps, levels.strides.clone())
}
