//! Acceptance gate. Runs every criterion, prints one line each and exits
//! non-zero if any failed.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use fsdet_core::attention::{deformable_attention, DeformAttnParams};
use fsdet_core::cfsb::{cfsb_forward, cfsb_spatial_branch};
use fsdet_core::harness::ablation::{run_row, ABLATION_TOGGLES};
use fsdet_core::harness::fixtures::{fixture_case, fixture_files, oracle_outputs, FIXTURE_SEEDS};
use fsdet_core::harness::gradsuite::{grad_ops, run_grad_suite};
use fsdet_core::harness::reparam::{verify_reparam, REPARAM_TOL};
use fsdet_core::harness::{count_params, train_toy, RunConfig};
use fsdet_core::losses::{
    focaler_eiou_loss, total_loss, varifocal_loss, BBox, LossWeights, VflParams,
};
use fsdet_core::spectral::{cfsb_freq_branch, dft2, idft2};
use fsdet_core::{ParamStore, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn grad_suite() -> Outcome {
    let start = Instant::now();
    let report = run_grad_suite(&RunConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .records
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let summary = format!(
        "{} ops x 3 seeds, worst rel err {worst:.2e}, {secs:.1}s",
        grad_ops().len()
    );
    let fails: Vec<String> = report
        .failures()
        .iter()
        .map(|r| format!("{}@{}", r.op, r.seed))
        .collect();
    check(
        report.passed() && secs < 300.0,
        summary.clone(),
        format!("{summary}; failing {fails:?}"),
    )
}

fn spectral() -> Outcome {
    let mut worst = [0.0f64; 4];
    let mut r = rng(2);
    for n in [8, 16] {
        for _ in 0..20 {
            let x = rand_t(&[2, n, n], &mut r);
            let s = dft2(&x).map_err(|e| e.to_string())?;
            let (re, im) = direct_dft(&x);
            worst[0] = worst[0]
                .max(s.real.max_abs_diff(&re))
                .max(s.imag.max_abs_diff(&im));
            let e: f64 = x.data().iter().map(|v| v * v).sum();
            worst[1] = worst[1].max((e - s.energy() / (n * n) as f64).abs() / e);
            worst[2] = worst[2].max(idft2(&s).unwrap().max_abs_diff(&x));
            let y = idft2(&s.keep_bins(|u, v| u == 0 && v == 0)).unwrap();
            for c in 0..2 {
                let mean = x.narrow0(c, 1).unwrap().sum() / (n * n) as f64;
                worst[3] = worst[3].max(
                    y.narrow0(c, 1)
                        .unwrap()
                        .max_abs_diff(&Tensor::full(&[1, n, n], mean)),
                );
            }
        }
    }
    let summary = format!(
        "dft {:.1e}, parseval {:.1e}, round trip {:.1e}, dc {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    check(
        worst[0] <= 1e-9 && worst[1] <= 1e-9 && worst[2] <= 1e-10 && worst[3] <= 1e-9,
        summary.clone(),
        summary,
    )
}

fn deformable() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let m = [1, 2, 4][r.random_range(0..3)];
        let d = m * r.random_range(1..=3);
        let c = r.random_range(1..=6);
        let k = r.random_range(1..=5);
        let n = r.random_range(1..=9);
        let (h, w) = (r.random_range(2..=7), r.random_range(2..=7));
        let mut store = ParamStore::new(100 + trial);
        let p = DeformAttnParams::new(&mut store, "da", c, d, m, k).map_err(|e| e.to_string())?;
        for id in [
            p.offset_head.weight,
            p.offset_head.bias,
            p.weight_head.weight,
            p.weight_head.bias,
        ] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, rand_t(&shape, &mut r)).unwrap();
        }
        let map = rand_t(&[c, h, w], &mut r);
        let q = rand_t(&[n, d], &mut r);
        let refs = Tensor::uniform(&[n, 2], 0.0, 1.0, &mut r);
        let (y, samples) =
            deformable_attention(&q, &refs, &map, &p, &store).map_err(|e| e.to_string())?;
        if samples != n * m * k {
            return Err(format!(
                "trial {trial}: {samples} samples, expected {}",
                n * m * k
            ));
        }
        worst = worst.max(y.max_abs_diff(&unrolled_deform(&q, &refs, &map, &p, &store)));
    }
    let summary = format!("10 configs, worst diff {worst:.1e}, sample counts exact");
    check(worst <= 1e-10, summary.clone(), summary)
}

fn reparam() -> Outcome {
    // even trials are RepConv and odd trials RepC3, so 100 gives 50 of each
    let recs = verify_reparam(100, 4).map_err(|e| e.to_string())?;
    let worst = recs.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let summary = format!("{} instances, worst max-norm {worst:.1e}", recs.len());
    check(
        recs.iter().all(|r| r.passed) && worst <= REPARAM_TOL,
        summary.clone(),
        summary,
    )
}

fn fixtures() -> Outcome {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut worst = 0.0f64;
    for seed in FIXTURE_SEEDS {
        let c = fixture_case(seed).map_err(|e| e.to_string())?;
        let got = [
            cfsb_spatial_branch(&c.input, &c.params, &c.store).unwrap(),
            cfsb_freq_branch(&c.input, &c.params.freq, &c.store).unwrap(),
            cfsb_forward(&c.input, &c.params, &c.store).unwrap(),
        ];
        for ((_, want), got) in oracle_outputs(&c).iter().zip(&got) {
            worst = worst.max(got.max_abs_diff(want));
        }
        for (name, bytes) in fixture_files(seed).map_err(|e| e.to_string())? {
            let committed = std::fs::read(dir.join(&name)).map_err(|e| format!("{name}: {e}"))?;
            if committed != bytes {
                return Err(format!("{name} does not regenerate bit-identically"));
            }
        }
    }
    let summary =
        format!("3 seeds, worst implementation vs oracle {worst:.1e}, regeneration bit-identical");
    check(worst <= 1e-9, summary.clone(), summary)
}

fn losses() -> Outcome {
    let vfl =
        varifocal_loss(&[0.0], &[0.5], &[true], VflParams::default()).map_err(|e| e.to_string())?;
    let a = BBox::new(0.4, 0.6, 0.2, 0.1).unwrap();
    let fe = focaler_eiou_loss(&a, &a, 0.0, 0.95);
    let tot = total_loss(1.0, 1.0, 1.0, LossWeights::default());
    let summary = format!("vfl {vfl:.12}, focaler-eiou {fe}, total {tot}");
    check(
        (vfl - 0.5 * std::f64::consts::LN_2).abs() <= 1e-10 && fe == 0.0 && tot == 9.0,
        summary.clone(),
        summary,
    )
}

fn training() -> Outcome {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let out = train_toy(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (a, b) = (
        out.initial_smoothed(cfg.smooth_window),
        out.final_smoothed(cfg.smooth_window),
    );
    let finite = out.losses().iter().all(|v| v.is_finite());
    let summary = format!(
        "{} steps, smoothed loss {a:.4} -> {b:.4} (ratio {:.3}), {secs:.1}s",
        out.curve.len(),
        b / a
    );
    check(
        finite && b < 0.5 * a && secs < 600.0,
        summary.clone(),
        summary,
    )
}

fn ablation() -> Outcome {
    let base = RunConfig::default();
    let off = run_row(&base, 1, ABLATION_TOGGLES[0], 5).map_err(|e| e.to_string())?;
    let on = run_row(&base, 6, ABLATION_TOGGLES[5], 5).map_err(|e| e.to_string())?;
    let p0 = count_params(&base.with_toggles(false, false, false)).map_err(|e| e.to_string())?;
    let mut growth = Vec::new();
    for (s, a, f) in [
        (true, false, false),
        (false, true, false),
        (false, false, true),
    ] {
        let p = count_params(&base.with_toggles(s, a, f)).map_err(|e| e.to_string())?;
        growth.push((p as f64 - p0 as f64) / p0 as f64);
    }
    let max_growth = growth.iter().cloned().fold(f64::MIN, f64::max);
    let summary = format!(
        "mean AP all-on {:.4} vs all-off {:.4}; params {} vs {}; largest single-toggle growth {:.1}%",
        on.mean_ap(),
        off.mean_ap(),
        on.params,
        off.params,
        100.0 * max_growth
    );
    let ok =
        on.mean_ap() >= off.mean_ap() && on.params > off.params && growth.iter().all(|g| *g < 0.4);
    check(ok, summary.clone(), summary)
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; `--list` must report no tests
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", grad_suite),
        ("spectral oracles", spectral),
        ("deformable attention oracle", deformable),
        ("re-parameterization", reparam),
        ("fixtures", fixtures),
        ("loss values", losses),
        ("toy training", training),
        ("directional ablation", ablation),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(msg) => println!("criterion {} {name}: PASS ({msg})", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({msg})", i + 1);
            }
        }
    }
    println!("acceptance: {}/8 passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
