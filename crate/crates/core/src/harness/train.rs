use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{assign_for_training, evaluate_ap};
use crate::harness::model::{decode, Pipeline};
use crate::harness::scene::{gen_synthetic_scene, BoxSet, Scene};
use crate::losses::{iou, BBox};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Seed offset separating held-out evaluation scenes from training scenes.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut p = store.get(id).to_vec();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= self.lr * (update + self.weight_decay * p[i]);
            }
            store.set(id, Tensor::new(store.get(id).shape().to_vec(), p)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

pub struct TrainOutcome {
    pub curve: Vec<StepRecord>,
    pub pipeline: Pipeline,
    pub store: ParamStore,
    pub param_count: usize,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.curve.iter().map(|r| r.loss).collect()
    }

    pub fn initial_smoothed(&self, window: usize) -> f64 {
        let l = self.losses();
        mean(&l[..window.min(l.len())])
    }

    pub fn final_smoothed(&self, window: usize) -> f64 {
        let l = self.losses();
        mean(&l[l.len() - window.min(l.len())..])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Training scenes for `cfg`: seeds `cfg.seed·1000 + i`.
pub fn training_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    scenes_from(cfg, cfg.seed.wrapping_mul(1000), cfg.scenes)
}

/// Held-out scenes drawn from a disjoint seed range.
pub fn eval_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    scenes_from(
        cfg,
        cfg.seed.wrapping_mul(1000).wrapping_add(EVAL_SEED_OFFSET),
        cfg.eval_scenes,
    )
}

fn scenes_from(cfg: &RunConfig, base: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64)
        .map(|i| {
            gen_synthetic_scene(
                base.wrapping_add(i),
                cfg.objects,
                (cfg.min_size, cfg.max_size),
                cfg.canvas,
            )
        })
        .collect()
}

/// Loss and parameter gradients of one scene.
pub fn scene_loss(
    pipeline: &Pipeline,
    store: &ParamStore,
    scene: &Scene,
    with_grad: bool,
) -> Result<(LossParts, Vec<Tensor>)> {
    let cfg = &pipeline.cfg;
    let mut tape = Tape::new();
    let params = if with_grad {
        store.bind(&mut tape)
    } else {
        store.bind_frozen(&mut tape)
    };
    let image = tape.constant(scene.image.clone());
    let out = pipeline.forward(&mut tape, &params, image)?;

    let preds = decode(tape.value(out.logits), tape.value(out.boxes));
    let pairs = assign_for_training(&preds, &scene.gt, cfg.match_iou);
    let q = preds.len();
    let mut targets = vec![0.0; q];
    let mut positive = vec![false; q];
    for &(p, g) in &pairs {
        targets[p] = iou(&preds.boxes[p], &scene.gt.boxes[g]);
        positive[p] = true;
    }
    let cls = tape.varifocal(out.logits, &targets, &positive, cfg.vfl)?;
    let norm = 1.0 / pairs.len().max(1) as f64;
    let (l1, geo) = if pairs.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let rows: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
        let gts: Vec<BBox> = pairs.iter().map(|&(_, g)| scene.gt.boxes[g]).collect();
        let matched = tape.gather_rows(out.boxes, &rows)?;
        let l1 = tape.l1_boxes(matched, &gts)?;
        let geo = tape.focaler_eiou(matched, &gts, cfg.focaler)?;
        (tape.scale(l1, norm), tape.scale(geo, norm))
    };
    let total = tape.total_loss(cls, l1, geo, cfg.weights)?;
    let parts = LossParts {
        total: tape.value(total).item(),
        cls: tape.value(cls).item(),
        l1: tape.value(l1).item(),
        iou: tape.value(geo).item(),
    };
    let grads = if with_grad {
        params.grads(&tape.backward(total)?)
    } else {
        Vec::new()
    };
    Ok((parts, grads))
}

fn check_finite(p: &LossParts, step: usize) -> Result<()> {
    for (term, v) in [
        ("cls", p.cls),
        ("l1", p.l1),
        ("iou", p.iou),
        ("total", p.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                step,
            });
        }
    }
    Ok(())
}

/// Batch loss and summed gradients, scenes in order. Per-scene work runs
/// on `threads` workers; the reduction order is fixed, so results do not
/// depend on the thread count.
fn batch(
    pipeline: &Pipeline,
    store: &ParamStore,
    scenes: &[Scene],
    threads: usize,
) -> Result<(LossParts, Vec<Tensor>)> {
    let per_scene: Vec<Result<(LossParts, Vec<Tensor>)>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| {
            scenes
                .par_iter()
                .map(|s| scene_loss(pipeline, store, s, true))
                .collect()
        })
    } else {
        scenes
            .iter()
            .map(|s| scene_loss(pipeline, store, s, true))
            .collect()
    };
    let n = scenes.len() as f64;
    let mut parts = LossParts::default();
    let mut sum: Option<Vec<Vec<f64>>> = None;
    for r in per_scene {
        let (p, g) = r?;
        parts.total += p.total / n;
        parts.cls += p.cls / n;
        parts.l1 += p.l1 / n;
        parts.iou += p.iou / n;
        match &mut sum {
            None => {
                sum = Some(
                    g.iter()
                        .map(|t| t.data().iter().map(|v| v / n).collect())
                        .collect(),
                )
            }
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(&g) {
                    for (x, v) in a.iter_mut().zip(t.data()) {
                        *x += v / n;
                    }
                }
            }
        }
    }
    let grads = sum
        .unwrap_or_default()
        .into_iter()
        .zip(store.ids())
        .map(|(d, id)| Tensor::new(store.get(id).shape().to_vec(), d))
        .collect::<Result<Vec<_>>>()?;
    Ok((parts, grads))
}

/// Full-batch training on [`training_scenes`]; one record per step.
pub fn train_toy(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_on(cfg, &training_scenes(cfg)?)
}

pub fn train_on(cfg: &RunConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument(
            "training needs at least one step".into(),
        ));
    }
    let (pipeline, mut store) = Pipeline::build(cfg)?;
    let param_count = store.count();
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (parts, grads) = batch(&pipeline, &store, scenes, cfg.threads)?;
        check_finite(&parts, step)?;
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            let name = store
                .name(store.ids().nth(bad).expect("index in range"))
                .to_string();
            return Err(Error::NonFinite {
                term: format!("gradient of {name}"),
                step,
            });
        }
        curve.push(StepRecord {
            step,
            loss: parts.total,
            cls: parts.cls,
            l1: parts.l1,
            iou: parts.iou,
        });
        opt.step(&mut store, &grads)?;
    }
    Ok(TrainOutcome {
        curve,
        pipeline,
        store,
        param_count,
    })
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &[StepRecord]) -> Result<()> {
    writeln!(w, "step,loss,cls,l1,iou")?;
    for r in curve {
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, r.cls, r.l1, r.iou)?;
    }
    Ok(())
}

/// Predictions of a trained pipeline on each scene.
pub fn predict_all(
    pipeline: &Pipeline,
    store: &ParamStore,
    scenes: &[Scene],
) -> Result<Vec<BoxSet>> {
    scenes
        .iter()
        .map(|s| pipeline.predict(store, &s.image))
        .collect()
}

/// AP of a trained pipeline on the given scenes at `cfg.eval_iou`.
pub fn scene_ap(outcome: &TrainOutcome, scenes: &[Scene]) -> Result<f64> {
    let preds = predict_all(&outcome.pipeline, &outcome.store, scenes)?;
    let gts: Vec<BoxSet> = scenes.iter().map(|s| s.gt.clone()).collect();
    Ok(evaluate_ap(&preds, &gts, outcome.pipeline.cfg.eval_iou))
}
