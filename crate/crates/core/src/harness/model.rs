use crate::attention::{AifiParams, BlockKind, C2fParams};
use crate::error::{shape_err, Result};
use crate::harness::config::RunConfig;
use crate::harness::scene::BoxSet;
use crate::losses::BBox;
use crate::ops::sigmoid;
use crate::params::{Activation, Binding, ConvParams, ParamStore};
use crate::pyramid::{FsfpnConfig, FsfpnParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 1;
/// Stem width followed by the widths of P2..P5.
pub const BACKBONE_WIDTHS: [usize; 5] = [8, 16, 32, 64, 128];
/// Strides of P2..P5.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Index of the head level (P3) among P2..P5.
pub const HEAD_LEVEL: usize = 1;
/// Initial classification bias, `logit(0.01)`.
const CLASS_PRIOR_LOGIT: f64 = -4.59511985013459;

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: ConvParams,
    pub c2f: C2fParams,
    pub shab: Option<C2fParams>,
}

/// Strided-conv backbone, encoder and pyramid, and a 1×1 head on P3 that
/// predicts one box and class logits per cell.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub stem: ConvParams,
    pub stages: Vec<Stage>,
    pub input_proj: Vec<ConvParams>,
    pub aifi: Vec<AifiParams>,
    pub neck: FsfpnParams,
    pub head: ConvParams,
}

pub struct PipelineOutput {
    /// `[Q]` for a single class.
    pub logits: Var,
    /// Decoded `(cx, cy, w, h)` rows `[Q, 4]`.
    pub boxes: Var,
    pub grid: (usize, usize),
    pub samples: usize,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Pipeline {
    /// Builds the pipeline and a store initialized from `cfg.seed`.
    pub fn build(cfg: &RunConfig) -> Result<(Pipeline, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let p = Pipeline::register(cfg, &mut store)?;
        Ok((p, store))
    }

    pub fn register(cfg: &RunConfig, store: &mut ParamStore) -> Result<Pipeline> {
        let act = Activation::Silu;
        let w = BACKBONE_WIDTHS;
        let stem = ConvParams::new(store, "backbone.stem", 3, w[0], 3, 2, true)?;
        let mut stages = Vec::new();
        for (i, level) in (2..=5).enumerate() {
            let (c_in, c) = (w[i], w[i + 1]);
            let name = format!("backbone.p{level}");
            let down = ConvParams::new(store, &format!("{name}.down"), c_in, c, 3, 2, true)?;
            let c2f = C2fParams::new(
                store,
                &format!("{name}.c2f"),
                c,
                c,
                c / 2,
                1,
                BlockKind::Plain,
                act,
            )?;
            let shab = if cfg.shab && cfg.shab_stages.contains(&level) {
                Some(C2fParams::shab(store, &format!("{name}.shab"), c, act)?)
            } else {
                None
            };
            stages.push(Stage { down, c2f, shab });
        }
        let input_proj = (0..4)
            .map(|i| {
                ConvParams::new(
                    store,
                    &format!("encoder.proj{}", i + 2),
                    w[i + 1],
                    cfg.hidden,
                    1,
                    1,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let aifi = if cfg.da_aifi {
            (0..cfg.aifi_layers)
                .map(|l| {
                    AifiParams::new(
                        store,
                        &format!("encoder.aifi{l}"),
                        cfg.hidden,
                        cfg.heads,
                        cfg.points,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let neck_cfg = FsfpnConfig {
            in_channels: vec![cfg.hidden; 4],
            hidden: cfg.hidden,
            repc3_depth: cfg.repc3_depth,
            frequency_spatial: cfg.fsfpn_cfsb,
            sni: cfg.sni,
            bottom_up_cfsb: cfg.bottom_up_cfsb,
            act,
            cfsb_act: if cfg.cfsb_silu {
                Activation::Silu
            } else {
                Activation::Identity
            },
        };
        let neck = FsfpnParams::new(store, "neck", neck_cfg)?;
        let head = ConvParams::new(store, "head", cfg.hidden, NUM_CLASSES + 4, 1, 1, true)?;
        if let Some(b) = head.bias {
            let mut bias = store.get(b).to_vec();
            bias[..NUM_CLASSES].fill(CLASS_PRIOR_LOGIT);
            store.set(b, Tensor::new(vec![NUM_CLASSES + 4], bias)?)?;
        }
        Ok(Pipeline {
            cfg: cfg.clone(),
            stem,
            stages,
            input_proj,
            aifi,
            neck,
            head,
        })
    }

    /// Backbone feature maps P2..P5.
    pub fn backbone(&self, tape: &mut Tape, params: &Binding, image: Var) -> Result<Vec<Var>> {
        let act = Activation::Silu;
        let x = self.stem.forward(tape, params, image)?;
        let mut x = act.apply(tape, x);
        let mut levels = Vec::with_capacity(4);
        for s in &self.stages {
            let d = s.down.forward(tape, params, x)?;
            let d = act.apply(tape, d);
            x = s.c2f.forward(tape, params, d)?;
            if let Some(shab) = &s.shab {
                let a = shab.forward(tape, params, x)?;
                x = tape.add(x, a)?;
            }
            levels.push(x);
        }
        Ok(levels)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, image: Var) -> Result<PipelineOutput> {
        let canvas = match tape.shape(image) {
            &[3, h, w] if h == w && h % 32 == 0 => h,
            s => {
                return Err(shape_err(format!(
                    "pipeline expects a square [3,H,W] image with H a multiple of 32, got {s:?}"
                )))
            }
        };
        let feats = self.backbone(tape, params, image)?;
        let mut proj = Vec::with_capacity(4);
        for (conv, &f) in self.input_proj.iter().zip(&feats) {
            proj.push(conv.forward(tape, params, f)?);
        }
        let mut samples = 0;
        for layer in &self.aifi {
            let (y, s) = layer.forward(tape, params, proj[3])?;
            proj[3] = y;
            samples += s;
        }
        let fused = self.neck.forward(tape, params, &proj)?;
        let raw = self.head.forward(tape, params, fused[HEAD_LEVEL])?;

        let g = canvas / LEVEL_STRIDES[HEAD_LEVEL];
        let q = g * g;
        let raw = tape.reshape(raw, &[NUM_CLASSES + 4, q])?;
        let raw = tape.transpose2(raw)?;
        let logits = tape.narrow(raw, 1, 0, NUM_CLASSES)?;
        let logits = tape.reshape(logits, &[q * NUM_CLASSES])?;
        let deltas = tape.narrow(raw, 1, NUM_CLASSES, 4)?;
        let prior = logit(self.cfg.prior_size);
        let anchors = Tensor::from_fn(&[q, 4], |i| {
            let (cell, k) = (i / 4, i % 4);
            match k {
                0 => logit(((cell % g) as f64 + 0.5) / g as f64),
                1 => logit(((cell / g) as f64 + 0.5) / g as f64),
                _ => prior,
            }
        });
        let boxes = tape.add_const(deltas, &anchors)?;
        let boxes = tape.sigmoid(boxes);
        Ok(PipelineOutput {
            logits,
            boxes,
            grid: (g, g),
            samples,
        })
    }

    /// Scores every cell of one image; no threshold is applied.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<BoxSet> {
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(decode(tape.value(out.logits), tape.value(out.boxes)))
    }
}

/// Turns head values into a box set with sigmoid scores.
pub fn decode(logits: &Tensor, boxes: &Tensor) -> BoxSet {
    let mut set = BoxSet::new();
    for (i, row) in boxes.data().chunks_exact(4).enumerate() {
        let b = BBox {
            cx: row[0],
            cy: row[1],
            w: row[2].max(1e-12),
            h: row[3].max(1e-12),
        };
        set.push(b, sigmoid(logits.data()[i]), 0);
    }
    set
}

/// Parameter count of the pipeline `cfg` describes (independent of seed).
pub fn count_params(cfg: &RunConfig) -> Result<usize> {
    Ok(Pipeline::build(cfg)?.1.count())
}
