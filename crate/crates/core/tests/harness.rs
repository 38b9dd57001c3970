mod common;

use common::*;
use fsdet_core::harness::ablation::{format_table, run_ablation, write_rows_jsonl};
use fsdet_core::harness::gradsuite::{check_op, grad_ops, run_grad_suite, Case, GradOp, EPS_SWEEP};
use fsdet_core::harness::train::{train_on, training_scenes};
use fsdet_core::harness::{
    count_params, evaluate_ap, gen_synthetic_scene, greedy_match, read_boxsets_csv, train_toy,
    write_boxsets_csv, BoxSet, Pipeline, RunConfig,
};
use fsdet_core::losses::{iou, BBox};
use fsdet_core::{ConvParams, Error, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn boxes(items: &[(f64, f64, f64, f64, f64)]) -> BoxSet {
    let mut s = BoxSet::new();
    for &(cx, cy, w, h, score) in items {
        s.push(BBox::new(cx, cy, w, h).unwrap(), score, 0);
    }
    s
}

fn random_set(r: &mut ChaCha8Rng, n: usize) -> BoxSet {
    let mut s = BoxSet::new();
    for _ in 0..n {
        let b = BBox::new(
            r.random_range(0.3..0.7),
            r.random_range(0.3..0.7),
            r.random_range(0.1..0.4),
            r.random_range(0.1..0.4),
        )
        .unwrap();
        s.push(b, r.random_range(0.0..1.0), 0);
    }
    s
}

fn tiny() -> RunConfig {
    RunConfig {
        steps: 2,
        scenes: 2,
        hidden: 8,
        heads: 2,
        repc3_depth: 1,
        ..RunConfig::default()
    }
}

// ---- scenes ----

#[test]
fn scene_contracts() {
    let empty = gen_synthetic_scene(3, 0, (4, 12), 64).unwrap();
    assert!(empty.gt.is_empty());
    let a = gen_synthetic_scene(4, 5, (4, 12), 64).unwrap();
    let b = gen_synthetic_scene(4, 5, (4, 12), 64).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.gt, b.gt);
    assert_eq!(a.gt.len(), 5);
    for bx in &a.gt.boxes {
        let (x1, y1, x2, y2) = bx.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
        for v in [x1, y1, x2, y2] {
            assert!(
                (v * 64.0 - (v * 64.0).round()).abs() < 1e-9,
                "box edges sit on pixel boundaries"
            );
        }
    }
}

#[test]
fn object_footprints_are_brighter_than_background() {
    let s = gen_synthetic_scene(5, 4, (6, 12), 64).unwrap();
    let mut inside = vec![false; 64 * 64];
    let mut sums = (0.0, 0.0);
    for bx in &s.gt.boxes {
        let (x1, y1, x2, y2) = bx.corners();
        let (x1, y1, x2, y2) = (
            (x1 * 64.0).round() as usize,
            (y1 * 64.0).round() as usize,
            (x2 * 64.0).round() as usize,
            (y2 * 64.0).round() as usize,
        );
        let mut m = 0.0;
        for i in y1..y2 {
            for j in x1..x2 {
                inside[i * 64 + j] = true;
                m += s.image.at(&[0, i, j]);
            }
        }
        sums.0 += m / ((y2 - y1) * (x2 - x1)) as f64;
    }
    let bg: Vec<f64> = (0..64 * 64)
        .filter(|&k| !inside[k])
        .map(|k| s.image.data()[k])
        .collect();
    sums.1 = bg.iter().sum::<f64>() / bg.len() as f64;
    assert!(sums.0 / s.gt.len() as f64 > sums.1 + 0.3);
}

#[test]
fn crowded_scene_reports_fewer_objects() {
    let s = gen_synthetic_scene(6, 200, (10, 12), 32).unwrap();
    assert_eq!(s.requested, 200);
    assert!(s.gt.len() < 200);
    assert!(gen_synthetic_scene(0, 1, (40, 50), 32).is_err());
}

// ---- matching ----

#[test]
fn match_examples() {
    let g = boxes(&[(0.5, 0.5, 0.2, 0.2, 1.0)]);
    assert_eq!(
        greedy_match(&boxes(&[(0.5, 0.5, 0.2, 0.2, 0.7)]), &g, 0.5),
        vec![(0, 0)]
    );
    let two = boxes(&[(0.5, 0.5, 0.2, 0.2, 0.4), (0.51, 0.5, 0.2, 0.2, 0.9)]);
    assert_eq!(greedy_match(&two, &g, 0.5), vec![(1, 0)]);
}

#[test]
fn greedy_matches_exhaustive_oracle_on_random_five_by_five() {
    let mut r = rng(7);
    for _ in 0..40 {
        let (p, g) = (random_set(&mut r, 5), random_set(&mut r, 5));
        let thr = r.random_range(0.1..0.6);
        let mut got = greedy_match(&p, &g, thr);
        let mut want = exhaustive_greedy(&p, &g, thr);
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_respect_threshold_and_claim_once(seed in any::<u64>(), np in 0usize..8, ng in 0usize..8, thr in 0.05f64..1.0) {
        let mut r = rng(seed);
        let (p, g) = (random_set(&mut r, np), random_set(&mut r, ng));
        let pairs = greedy_match(&p, &g, thr);
        let mut seen_p = vec![false; np];
        let mut seen_g = vec![false; ng];
        for (a, b) in pairs {
            prop_assert!(iou(&p.boxes[a], &g.boxes[b]) >= thr);
            prop_assert!(!seen_p[a] && !seen_g[b]);
            seen_p[a] = true;
            seen_g[b] = true;
        }
    }

    #[test]
    fn ap_monotone_under_added_detections(seed in any::<u64>()) {
        let mut r = rng(seed);
        let gts: Vec<BoxSet> = (0..2).map(|_| random_set(&mut r, 3)).collect();
        let preds: Vec<BoxSet> = (0..2).map(|_| random_set(&mut r, 3)).collect();
        let base = evaluate_ap(&preds, &gts, 0.5);

        // a correct detection for a gt that no current prediction claims
        let scene = r.random_range(0..2);
        let pairs = greedy_match(&preds[scene], &gts[scene], 0.5);
        if let Some(g) = (0..3).find(|g| pairs.iter().all(|&(_, b)| b != *g)) {
            let mut more = preds.clone();
            more[scene].push(gts[scene].boxes[g], r.random_range(0.0..1.0), 0);
            prop_assert!(evaluate_ap(&more, &gts, 0.5) >= base - 1e-12);
        }

        // a false positive far from everything
        let mut fp = preds.clone();
        fp[scene].push(BBox::new(0.05, 0.05, 0.02, 0.02).unwrap(), r.random_range(0.0..1.0), 0);
        prop_assert!(evaluate_ap(&fp, &gts, 0.5) <= base + 1e-12);
    }
}

// ---- average precision ----

#[test]
fn ap_examples() {
    let gts = vec![boxes(&[
        (0.2, 0.2, 0.1, 0.1, 1.0),
        (0.7, 0.7, 0.1, 0.1, 1.0),
    ])];
    assert_eq!(evaluate_ap(&gts, &gts, 0.5), 1.0);
    assert_eq!(evaluate_ap(&[BoxSet::new()], &gts, 0.5), 0.0);
    assert_eq!(evaluate_ap(&[BoxSet::new()], &[BoxSet::new()], 0.5), 1.0);
    assert_eq!(evaluate_ap(&gts, &[BoxSet::new()], 0.5), 0.0);
}

#[test]
fn ap_half_recall_full_precision() {
    let gts = vec![
        boxes(&[(0.2, 0.2, 0.1, 0.1, 1.0), (0.7, 0.7, 0.1, 0.1, 1.0)]),
        boxes(&[(0.3, 0.6, 0.1, 0.1, 1.0), (0.8, 0.2, 0.1, 0.1, 1.0)]),
    ];
    let preds = vec![
        boxes(&[(0.2, 0.2, 0.1, 0.1, 0.9)]),
        boxes(&[(0.8, 0.2, 0.1, 0.1, 0.8)]),
    ];
    // ranked: TP (r=¼, p=1), TP (r=½, p=1); levels 0..=0.50 see precision 1
    assert!((evaluate_ap(&preds, &gts, 0.5) - 51.0 / 101.0).abs() < 1e-12);
}

#[test]
fn ap_with_interleaved_false_positive() {
    let gts = vec![boxes(&[
        (0.2, 0.2, 0.1, 0.1, 1.0),
        (0.7, 0.7, 0.1, 0.1, 1.0),
    ])];
    let preds = vec![boxes(&[
        (0.2, 0.2, 0.1, 0.1, 0.9),
        (0.5, 0.1, 0.1, 0.1, 0.8),
        (0.7, 0.7, 0.1, 0.1, 0.7),
    ])];
    // PR points (½, 1), (½, ½), (1, ⅔): levels ≤ ½ take 1, the rest ⅔
    let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    assert!((evaluate_ap(&preds, &gts, 0.5) - want).abs() < 1e-12);
}

#[test]
fn boxsets_round_trip_through_csv() {
    let sets = vec![
        random_set(&mut rng(8), 3),
        BoxSet::new(),
        random_set(&mut rng(9), 2),
    ];
    let mut buf = Vec::new();
    write_boxsets_csv(&mut buf, &sets).unwrap();
    let back = read_boxsets_csv(&buf[..]).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in sets.iter().zip(&back) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert!((x.cx - y.cx).abs() < 1e-12 && (x.w - y.w).abs() < 1e-12);
        }
    }
}

// ---- pipeline ----

#[test]
fn single_conv_param_count() {
    let mut store = ParamStore::new(0);
    ConvParams::new(&mut store, "c", 2, 4, 3, 1, true).unwrap();
    assert_eq!(store.count(), 76);
}

#[test]
fn pipelines_run_on_small_canvas() {
    for cfg in [RunConfig::baseline(), RunConfig::default()] {
        let (p, store) = Pipeline::build(&cfg).unwrap();
        let preds = p
            .predict(&store, &rand_t(&[3, 64, 64], &mut rng(10)))
            .unwrap();
        assert_eq!(preds.len(), 8 * 8);
        assert!(preds.scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }
}

#[test]
fn param_count_depends_only_on_config() {
    let a = count_params(&RunConfig {
        seed: 11,
        ..RunConfig::default()
    })
    .unwrap();
    let b = count_params(&RunConfig {
        seed: 12,
        ..RunConfig::default()
    })
    .unwrap();
    assert_eq!(a, b);
    assert!(count_params(&RunConfig::baseline()).unwrap() < a);
}

#[test]
fn invalid_config_rejected_at_build() {
    let cfg = RunConfig {
        hidden: 6,
        heads: 4,
        ..RunConfig::default()
    };
    assert!(Pipeline::build(&cfg).is_err());
    assert!(RunConfig::parse("hidden = 8\nno_such_key = 1\n").is_err());
}

#[test]
fn config_text_round_trips() {
    let cfg = RunConfig {
        shab: false,
        hidden: 24,
        lr: 5e-4,
        ..RunConfig::default()
    };
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

// ---- training ----

#[test]
fn training_examples() {
    assert_eq!(
        train_toy(&RunConfig { steps: 1, ..tiny() })
            .unwrap()
            .curve
            .len(),
        1
    );
    let frozen = train_toy(&RunConfig {
        lr: 0.0,
        weight_decay: 0.0,
        steps: 3,
        ..tiny()
    })
    .unwrap();
    let l = frozen.losses();
    assert!(l.iter().all(|v| *v == l[0]));
}

#[test]
fn training_is_deterministic() {
    let a = train_toy(&tiny()).unwrap();
    let b = train_toy(&tiny()).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.store.values(), b.store.values());
}

#[test]
fn non_finite_loss_names_the_term() {
    let cfg = RunConfig { steps: 1, ..tiny() };
    let mut scenes = training_scenes(&cfg).unwrap();
    scenes[0].image = Tensor::full(&[3, 64, 64], f64::NAN);
    match train_on(&cfg, &scenes) {
        Err(Error::NonFinite { term, step }) => {
            assert_eq!(step, 0);
            assert!(!term.is_empty());
        }
        other => panic!(
            "expected a non-finite error, got {:?}",
            other.map(|o| o.curve.len())
        ),
    }
}

// ---- gradient suite ----

fn corrupted(_seed: u64) -> fsdet_core::Result<Case> {
    Ok(Case {
        inputs: vec![rand_t(&[3, 2], &mut rng(12))],
        f: Box::new(|tape: &mut Tape, v: &[fsdet_core::Var]| {
            let x = tape.value(v[0]).clone();
            let y = x.map(|a| a * a);
            // derivative reported as x instead of 2x
            Ok(tape.push_op(
                "bad_square",
                &[v[0]],
                y,
                Box::new(move |args| vec![Some(args.grad.mul(&x).unwrap())]),
            ))
        }),
    })
}

#[test]
fn corrupted_gradient_is_reported() {
    let op = GradOp {
        name: "bad_square",
        nonlinear: true,
        build: corrupted,
    };
    let rec = check_op(&op, 0, 1e-5, 1e-4, 6).unwrap();
    assert!(!rec.passed);
    assert!(rec.max_rel_err > 0.1);
}

#[test]
fn grad_suite_covers_every_op_and_sweep_prefers_middle_step() {
    let cfg = RunConfig::default();
    let report = run_grad_suite(&cfg).unwrap();
    let names: Vec<&str> = grad_ops().iter().map(|o| o.name).collect();
    for required in [
        "conv2d",
        "softmax",
        "bilinear_sample",
        "dft2",
        "idft2",
        "freq_filter",
        "cfsb_spatial",
        "cfsb_freq",
        "cfsb",
        "shsa",
        "shab",
        "deformable_attention",
        "da_aifi",
        "spdconv",
        "sni",
        "repconv",
        "repc3",
        "fsfpn",
        "varifocal",
        "l1_boxes",
        "focaler_eiou",
        "total_loss",
    ] {
        assert!(names.contains(&required), "{required} missing");
    }
    assert_eq!(report.records.len(), 3 * names.len());
    assert!(report.passed(), "{:?}", report.failures());
    let worst = report.worst_by_op();
    assert_eq!(worst.len(), names.len());

    let g = report.sweep_geomean();
    assert_eq!(
        g.iter().map(|p| p.0).collect::<Vec<_>>(),
        EPS_SWEEP.to_vec()
    );
    let best = g.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    assert_eq!(best, 1e-5);

    let mut buf = Vec::new();
    report.write_jsonl(&mut buf).unwrap();
    let lines = String::from_utf8(buf).unwrap();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["max_rel_err"].is_number() && v["op"].is_string());
    }
}

// ---- ablation ----

#[test]
fn ablation_table_has_six_rows() {
    let base = RunConfig {
        steps: 1,
        scenes: 1,
        eval_scenes: 1,
        ..tiny()
    };
    let rows = run_ablation(&base, 1).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].params < rows[5].params);
    assert_eq!(
        (rows[0].shab, rows[0].da_aifi, rows[0].fsfpn_cfsb),
        (false, false, false)
    );
    assert_eq!(
        (rows[5].shab, rows[5].da_aifi, rows[5].fsfpn_cfsb),
        (true, true, true)
    );
    assert_eq!(format_table(&rows).lines().count(), 7);
    let mut buf = Vec::new();
    write_rows_jsonl(&mut buf, &rows).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
}
