use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{reference_points, AifiParams, C2fParams, DeformAttnParams, ShsaParams};
use crate::cfsb::CfsbParams;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::harness::config::RunConfig;
use crate::losses::{BBox, FocalerParams, LossWeights, VflParams};
use crate::params::{Activation, Binding, ParamStore};
use crate::pyramid::{
    sni, FsfpnConfig, FsfpnParams, RepC3Params, RepConvParams, SniVariant, SpdConvParams,
};
use crate::spectral::{FreqBranchParams, FreqFilterParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Seeds per operation.
pub const SUITE_SEEDS: u64 = 3;
/// Step sizes of the sweep run on nonlinear operations.
pub const EPS_SWEEP: [f64; 3] = [1e-4, 1e-5, 1e-6];

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Inputs and scalar-or-tensor function for one check.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: Forward,
}

/// One differentiable operation of the suite.
pub struct GradOp {
    pub name: &'static str,
    /// Linear operations have no truncation error and are skipped by the
    /// step-size sweep.
    pub nonlinear: bool,
    pub build: fn(u64) -> Result<Case>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradRecord {
    pub op: String,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradSuiteReport {
    /// Checks at the configured step size; these decide pass or fail.
    pub records: Vec<GradRecord>,
    /// Step-size sweep, informational.
    pub sweep: Vec<GradRecord>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&GradRecord> {
        self.records.iter().filter(|r| !r.passed).collect()
    }

    /// Worst error per operation across seeds, in suite order.
    pub fn worst_by_op(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|(n, _)| *n == r.op) {
                Some((_, e)) => *e = e.max(r.max_rel_err),
                None => out.push((r.op.clone(), r.max_rel_err)),
            }
        }
        out
    }

    /// Geometric mean of the sweep errors at each step size, in
    /// [`EPS_SWEEP`] order. Exact zeros are clamped to `1e-300`.
    pub fn sweep_geomean(&self) -> Vec<(f64, f64)> {
        EPS_SWEEP
            .iter()
            .map(|&eps| {
                let errs: Vec<f64> = self
                    .sweep
                    .iter()
                    .filter(|r| r.eps == eps)
                    .map(|r| r.max_rel_err.max(1e-300).ln())
                    .collect();
                (
                    eps,
                    (errs.iter().sum::<f64>() / errs.len().max(1) as f64).exp(),
                )
            })
            .collect()
    }

    /// One JSON object per line: every check, then the sweep with
    /// `"sweep": true`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (recs, sweep) in [(&self.records, false), (&self.sweep, true)] {
            for r in recs {
                let mut v = serde_json::to_value(r)?;
                v["sweep"] = sweep.into();
                writeln!(w, "{v}")?;
            }
        }
        Ok(())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x6a09)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Points `(x, y)` away from integer pixel coordinates, where bilinear
/// interpolation has kinks, and partly outside the map.
fn off_grid_points(n: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h } as f64;
        let base = r.random_range(-1i64..extent as i64) as f64;
        base + r.random_range(0.1..0.9)
    })
}

fn plain(
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    Ok(Case {
        inputs,
        f: Box::new(f),
    })
}

/// Checks a module against its inputs and every parameter tensor in `store`.
fn module<M: 'static>(
    store: &ParamStore,
    inputs: Vec<Tensor>,
    m: M,
    fwd: impl Fn(&M, &mut Tape, &Binding, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let nx = inputs.len();
    let mut all = inputs;
    all.extend(store.values());
    plain(all, move |t, v| {
        let b = Binding::from_vars(v[nx..].to_vec());
        fwd(&m, t, &b, &v[..nx])
    })
}

/// Random offset and weight heads so sampling leaves the pixel grid.
fn randomize_heads(p: &DeformAttnParams, store: &mut ParamStore, r: &mut ChaCha8Rng) -> Result<()> {
    for lin in [&p.offset_head, &p.weight_head] {
        for id in [lin.weight, lin.bias] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::uniform(&shape, -0.3, 0.3, r))?;
        }
    }
    Ok(())
}

fn boxes(n: usize, r: &mut ChaCha8Rng) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            BBox::new(
                r.random_range(0.3..0.7),
                r.random_range(0.3..0.7),
                r.random_range(0.1..0.4),
                r.random_range(0.1..0.4),
            )
            .expect("positive extents")
        })
        .collect()
}

/// Predictions near `gts` so they overlap and the IoU terms are active.
fn jittered(gts: &[BBox], r: &mut ChaCha8Rng) -> Tensor {
    let data = gts
        .iter()
        .flat_map(|b| {
            let a = b.to_array();
            [
                a[0] + r.random_range(-0.05..0.05),
                a[1] + r.random_range(-0.05..0.05),
                a[2] * r.random_range(0.7..1.3),
                a[3] * r.random_range(0.7..1.3),
            ]
        })
        .collect();
    Tensor::from_parts(vec![gts.len(), 4], data)
}

fn op_conv2d(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let x = uniform(&[3, 6, 5], &mut r);
    let w = uniform(&[4, 3, 3, 3], &mut r);
    let b = uniform(&[4], &mut r);
    plain(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1))
}

fn op_softmax(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    plain(vec![uniform(&[3, 5], &mut r).scale(2.0)], |t, v| {
        t.softmax(v[0], 1)
    })
}

fn op_layer_norm(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let x = uniform(&[3, 6], &mut r);
    let g = uniform(&[6], &mut r);
    let b = uniform(&[6], &mut r);
    plain(vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
}

fn op_bilinear(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let f = uniform(&[2, 5, 6], &mut r);
    let p = off_grid_points(7, 5, 6, &mut r);
    plain(vec![f, p], |t, v| t.bilinear_sample(v[0], v[1]))
}

fn op_dft2(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    plain(vec![uniform(&[2, 4, 8], &mut r)], |t, v| t.dft2(v[0]))
}

fn op_dft2_direct(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    plain(vec![uniform(&[2, 3, 5], &mut r)], |t, v| t.dft2(v[0]))
}

fn op_idft2(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    plain(vec![uniform(&[4, 4, 6], &mut r)], |t, v| t.idft2(v[0]))
}

fn op_freq_filter(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = FreqFilterParams::new(&mut store, "mask", 2)?;
    let x = uniform(&[2, 4, 4], &mut r);
    module(&store, vec![x], p, |p, t, b, v| {
        let s = t.dft2(v[0])?;
        let s = p.forward(t, b, s)?;
        t.idft2(s)
    })
}

fn op_cfsb_spatial(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = CfsbParams::new(&mut store, "cfsb", 2, Activation::Silu)?;
    let x = uniform(&[2, 5, 5], &mut r);
    module(&store, vec![x], p, |p, t, b, v| {
        p.spatial_forward(t, b, v[0])
    })
}

fn op_cfsb_freq(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = FreqBranchParams::new(&mut store, "freq", 2)?;
    let x = uniform(&[2, 4, 4], &mut r);
    module(&store, vec![x], p, |p, t, b, v| p.forward(t, b, v[0]))
}

fn op_cfsb(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = CfsbParams::new(&mut store, "cfsb", 2, Activation::Silu)?;
    let x = uniform(&[2, 4, 4], &mut r);
    module(&store, vec![x], p, |p, t, b, v| p.forward(t, b, v[0]))
}

fn op_shsa(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = ShsaParams::new(&mut store, "shsa", 4, Some(3))?;
    let x = uniform(&[4, 3, 3], &mut r);
    module(&store, vec![x], p, |p, t, b, v| p.forward(t, b, v[0]))
}

fn op_shab(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = C2fParams::shab(&mut store, "shab", 8, Activation::Silu)?;
    let x = uniform(&[8, 3, 3], &mut r);
    module(&store, vec![x], p, |p, t, b, v| p.forward(t, b, v[0]))
}

fn op_deform(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = DeformAttnParams::new(&mut store, "attn", 3, 4, 2, 3)?;
    randomize_heads(&p, &mut store, &mut r)?;
    let (h, w) = (3, 4);
    let q = uniform(&[h * w, 4], &mut r);
    let value = uniform(&[3, h, w], &mut r);
    let refs = reference_points(h, w);
    module(&store, vec![q, value], p, move |p, t, b, v| {
        Ok(p.forward(t, b, v[0], &refs, v[1])?.out)
    })
}

fn op_da_aifi(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = AifiParams::new(&mut store, "aifi", 8, 2, 2)?;
    randomize_heads(&p.attn, &mut store, &mut r)?;
    let x = uniform(&[8, 2, 3], &mut r);
    module(&store, vec![x], p, |p, t, b, v| {
        Ok(p.forward(t, b, v[0])?.0)
    })
}

fn op_spdconv(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = SpdConvParams::new(&mut store, "spd", 2, 3)?;
    let x = uniform(&[2, 4, 6], &mut r);
    module(&store, vec![x], p, |p, t, b, v| p.forward(t, b, v[0]))
}

fn op_sni(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    plain(vec![uniform(&[2, 3, 2], &mut r)], |t, v| {
        sni(t, v[0], (6, 4), SniVariant::Linear)
    })
}

fn op_repconv(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = RepConvParams::new(&mut store, "rep", 3, 3, 1, true)?;
    let x = uniform(&[3, 4, 4], &mut r);
    module(&store, vec![x], p, |p, t, b, v| {
        p.forward_training(t, b, v[0])
    })
}

fn op_repc3(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let p = RepC3Params::new(&mut store, "c3", 3, 4, 2, 2, Activation::Silu)?;
    let x = uniform(&[3, 4, 4], &mut r);
    module(&store, vec![x], p, |p, t, b, v| {
        p.forward_training(t, b, v[0])
    })
}

fn op_fsfpn(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed);
    let mut cfg = FsfpnConfig::new(vec![2, 3, 4], 4);
    cfg.repc3_depth = 1;
    cfg.bottom_up_cfsb = true;
    let p = FsfpnParams::new(&mut store, "fpn", cfg)?;
    let maps = vec![
        uniform(&[2, 8, 8], &mut r),
        uniform(&[3, 4, 4], &mut r),
        uniform(&[4, 2, 2], &mut r),
    ];
    module(&store, maps, p, |p, t, b, v| {
        let outs = p.forward(t, b, v)?;
        let flat: Vec<Var> = outs
            .iter()
            .map(|&o| t.reshape(o, &[t.value(o).numel()]))
            .collect::<Result<_>>()?;
        t.concat(&flat, 0)
    })
}

fn op_varifocal(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let n = 6;
    let z = uniform(&[n], &mut r).scale(3.0);
    let positive: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let targets: Vec<f64> = positive
        .iter()
        .map(|&p| if p { r.random_range(0.1..0.9) } else { 0.0 })
        .collect();
    plain(vec![z], move |t, v| {
        t.varifocal(v[0], &targets, &positive, VflParams::default())
    })
}

fn op_l1(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let gts = boxes(3, &mut r);
    let pred = jittered(&gts, &mut r);
    plain(vec![pred], move |t, v| t.l1_boxes(v[0], &gts))
}

fn op_focaler(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let gts = boxes(3, &mut r);
    let pred = jittered(&gts, &mut r);
    plain(vec![pred], move |t, v| {
        t.focaler_eiou(v[0], &gts, FocalerParams::default())
    })
}

fn op_total(seed: u64) -> Result<Case> {
    let mut r = rng(seed);
    let parts: Vec<Tensor> = (0..3)
        .map(|_| Tensor::scalar(r.random_range(0.0..2.0)))
        .collect();
    plain(parts, |t, v| {
        t.total_loss(v[0], v[1], v[2], LossWeights::default())
    })
}

/// Every differentiable operation covered by the suite.
pub fn grad_ops() -> Vec<GradOp> {
    let op = |name, nonlinear, build| GradOp {
        name,
        nonlinear,
        build,
    };
    vec![
        op("conv2d", false, op_conv2d as fn(u64) -> Result<Case>),
        op("softmax", true, op_softmax),
        op("layer_norm", true, op_layer_norm),
        op("bilinear_sample", true, op_bilinear),
        op("dft2", false, op_dft2),
        op("dft2_direct", false, op_dft2_direct),
        op("idft2", false, op_idft2),
        op("freq_filter", false, op_freq_filter),
        op("cfsb_spatial", true, op_cfsb_spatial),
        op("cfsb_freq", false, op_cfsb_freq),
        op("cfsb", true, op_cfsb),
        op("shsa", true, op_shsa),
        op("shab", true, op_shab),
        op("deformable_attention", true, op_deform),
        op("da_aifi", true, op_da_aifi),
        op("spdconv", false, op_spdconv),
        op("sni", false, op_sni),
        op("repconv", false, op_repconv),
        op("repc3", true, op_repc3),
        op("fsfpn", true, op_fsfpn),
        op("varifocal", true, op_varifocal),
        op("l1_boxes", false, op_l1),
        op("focaler_eiou", true, op_focaler),
        op("total_loss", false, op_total),
    ]
}

/// Checks one operation at one seed and step size.
pub fn check_op(op: &GradOp, seed: u64, eps: f64, tol: f64, samples: usize) -> Result<GradRecord> {
    let case = (op.build)(seed)?;
    let opts = GradCheckOptions {
        eps,
        tol,
        max_elements_per_input: Some(samples),
        seed,
    };
    let rep = grad_check(case.f, &case.inputs, &opts)?;
    Ok(GradRecord {
        op: op.name.to_string(),
        seed,
        eps,
        tol,
        checked: rep.inputs.iter().map(|i| i.checked).sum(),
        max_rel_err: rep.max_rel_err(),
        passed: rep.passed(),
    })
}

/// Every operation over [`SUITE_SEEDS`] seeds starting at `cfg.seed`, plus
/// the step-size sweep on nonlinear operations at the first seed.
pub fn run_grad_suite(cfg: &RunConfig) -> Result<GradSuiteReport> {
    let mut report = GradSuiteReport::default();
    for op in grad_ops() {
        for s in 0..SUITE_SEEDS {
            report.records.push(check_op(
                &op,
                cfg.seed + s,
                cfg.grad_eps,
                cfg.grad_tol,
                cfg.grad_samples,
            )?);
        }
        if op.nonlinear {
            for eps in EPS_SWEEP {
                report.sweep.push(check_op(
                    &op,
                    cfg.seed,
                    eps,
                    cfg.grad_tol,
                    cfg.grad_samples,
                )?);
            }
        }
    }
    Ok(report)
}
