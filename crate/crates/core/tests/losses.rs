mod common;

use common::*;
use fsdet_core::losses::{
    focaler_eiou_loss, iou, l1_box_loss, total_loss, varifocal_loss, BBox, FocalerParams,
    LossWeights, VflParams,
};
use fsdet_core::{grad_check, GradCheckOptions, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h).unwrap()
}

fn random_box(r: &mut ChaCha8Rng) -> BBox {
    b(
        r.random_range(0.1..0.9),
        r.random_range(0.1..0.9),
        r.random_range(0.02..0.5),
        r.random_range(0.02..0.5),
    )
}

/// Penalty terms from explicit corners and the enclosing rectangle.
fn eiou_penalty(p: &BBox, g: &BBox) -> f64 {
    let (px1, py1, px2, py2) = (
        p.cx - p.w / 2.0,
        p.cy - p.h / 2.0,
        p.cx + p.w / 2.0,
        p.cy + p.h / 2.0,
    );
    let (gx1, gy1, gx2, gy2) = (
        g.cx - g.w / 2.0,
        g.cy - g.h / 2.0,
        g.cx + g.w / 2.0,
        g.cy + g.h / 2.0,
    );
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let c2 = cw * cw + ch * ch;
    let centre = (p.cx - g.cx).powi(2) + (p.cy - g.cy).powi(2);
    let term = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    term(centre, c2) + term((p.w - g.w).powi(2), cw * cw) + term((p.h - g.h).powi(2), ch * ch)
}

fn eiou_oracle(p: &BBox, g: &BBox, d: f64, u: f64) -> f64 {
    let iw = ((p.cx + p.w / 2.0).min(g.cx + g.w / 2.0) - (p.cx - p.w / 2.0).max(g.cx - g.w / 2.0))
        .max(0.0);
    let ih = ((p.cy + p.h / 2.0).min(g.cy + g.h / 2.0) - (p.cy - p.h / 2.0).max(g.cy - g.h / 2.0))
        .max(0.0);
    let inter = iw * ih;
    let v = inter / (p.w * p.h + g.w * g.h - inter);
    1.0 - ((v - d) / (u - d)).clamp(0.0, 1.0) + eiou_penalty(p, g)
}

// ---- IoU ----

#[test]
fn iou_identical_and_disjoint() {
    let a = b(0.3, 0.4, 0.2, 0.1);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &b(0.8, 0.8, 0.1, 0.1)), 0.0);
}

#[test]
fn iou_quarter_grid_case() {
    // [0,0.5]² against [0.25,0.75]²: overlap 0.0625, union 0.4375
    let v = iou(&b(0.25, 0.25, 0.5, 0.5), &b(0.5, 0.5, 0.5, 0.5));
    assert!((v - 1.0 / 7.0).abs() < 1e-12);
}

#[test]
fn invalid_boxes_rejected() {
    assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
    assert!(BBox::new(0.5, f64::NAN, 0.1, 0.1).is_err());
}

// ---- varifocal ----

#[test]
fn varifocal_limits_and_half_case() {
    let v = VflParams::default();
    assert!(varifocal_loss(&[40.0], &[1.0], &[true], v).unwrap() < 1e-15);
    assert!(varifocal_loss(&[-40.0], &[0.0], &[false], v).unwrap() < 1e-15);
    let half = varifocal_loss(&[0.0], &[0.5], &[true], v).unwrap();
    assert!((half - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn varifocal_positives_are_q_weighted_bce() {
    let mut r = rng(1);
    let n = 12;
    let z: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
    let q: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let got = varifocal_loss(&z, &q, &vec![true; n], VflParams::default()).unwrap();
    let bce = |z: f64, q: f64| {
        let p = 1.0 / (1.0 + (-z).exp());
        -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
    };
    let want = z.iter().zip(&q).map(|(&z, &q)| q * bce(z, q)).sum::<f64>() / n as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn varifocal_negatives_are_focal_weighted() {
    let v = VflParams {
        alpha: 0.6,
        gamma: 1.5,
    };
    let z = [0.3, -1.2];
    let got = varifocal_loss(&z, &[0.0, 0.0], &[false, false], v).unwrap();
    let want: f64 = z
        .iter()
        .map(|&z| {
            let p = 1.0 / (1.0 + (-z).exp());
            -0.6 * p.powf(1.5) * (1.0 - p).ln()
        })
        .sum();
    assert!((got - want).abs() < 1e-12, "no positives normalizes by one");
}

#[test]
fn varifocal_extreme_logits_stay_finite() {
    let v = varifocal_loss(
        &[1e4, -1e4],
        &[0.0, 1.0],
        &[false, true],
        VflParams::default(),
    )
    .unwrap();
    assert!(v.is_finite() && v > 0.0);
}

// ---- L1 ----

#[test]
fn l1_examples() {
    let a = b(0.4, 0.5, 0.2, 0.3);
    assert_eq!(l1_box_loss(&a, &a), 0.0);
    assert!((l1_box_loss(&b(0.5, 0.5, 0.2, 0.3), &a) - 0.1).abs() < 1e-15);
    let mut r = rng(2);
    let (p, g) = (random_box(&mut r), random_box(&mut r));
    let want = (p.cx - g.cx).abs() + (p.cy - g.cy).abs() + (p.w - g.w).abs() + (p.h - g.h).abs();
    assert_eq!(l1_box_loss(&p, &g), want);
}

// ---- Focaler-EIoU ----

#[test]
fn focaler_identical_boxes_is_zero() {
    let a = b(0.3, 0.6, 0.1, 0.2);
    assert_eq!(focaler_eiou_loss(&a, &a, 0.0, 0.95), 0.0);
}

#[test]
fn focaler_far_equal_boxes() {
    let (p, g) = (b(0.1, 0.1, 0.1, 0.1), b(0.8, 0.6, 0.1, 0.1));
    // enclosing box spans [0.05,0.85]×[0.05,0.65]
    let want = 1.0 + (0.49 + 0.25) / (0.64 + 0.36);
    assert!((focaler_eiou_loss(&p, &g, 0.0, 0.95) - want).abs() < 1e-12);
}

#[test]
fn focaler_matches_corner_oracle() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (p, g) = (random_box(&mut r), random_box(&mut r));
        let (d, u) = (r.random_range(0.0..0.4), r.random_range(0.5..1.0));
        let got = focaler_eiou_loss(&p, &g, d, u);
        assert!((got - eiou_oracle(&p, &g, d, u)).abs() < 1e-12);
    }
}

#[test]
fn losses_non_negative_on_thousand_pairs() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let (p, g) = (random_box(&mut r), random_box(&mut r));
        assert!(focaler_eiou_loss(&p, &g, 0.0, 0.95) >= 0.0);
        assert!(l1_box_loss(&p, &g) >= 0.0);
        let z = r.random_range(-10.0..10.0);
        let q = r.random_range(0.0..1.0);
        let pos = r.random_bool(0.5);
        assert!(varifocal_loss(&[z], &[q], &[pos], VflParams::default()).unwrap() >= 0.0);
    }
}

#[test]
fn focaler_overlap_term_non_increasing_in_iou() {
    let mut r = rng(5);
    let mut rows: Vec<(f64, f64)> = (0..500)
        .map(|_| {
            let (p, g) = (random_box(&mut r), random_box(&mut r));
            (
                iou(&p, &g),
                focaler_eiou_loss(&p, &g, 0.1, 0.8) - eiou_penalty(&p, &g),
            )
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in rows.windows(2) {
        assert!(w[1].1 <= w[0].1 + 1e-12);
    }
}

#[test]
fn focaler_passes_grad_check_away_from_clamps() {
    let mut r = rng(6);
    let f = FocalerParams::default();
    let mut gts = Vec::new();
    let mut rows = Vec::new();
    while gts.len() < 6 {
        let g = random_box(&mut r);
        let p = b(
            g.cx + r.random_range(-0.05..0.05),
            g.cy + r.random_range(-0.05..0.05),
            g.w * r.random_range(0.7..1.3),
            g.h * r.random_range(0.7..1.3),
        );
        let v = iou(&p, &g);
        if v > 0.05 && v < 0.9 {
            gts.push(g);
            rows.extend(p.to_array());
        }
    }
    let rep = grad_check(
        |t, v| t.focaler_eiou(v[0], &gts, f),
        &[t(&[6, 4], rows)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_err() < 1e-4, "{}", rep.max_rel_err());
}

#[test]
fn invalid_focaler_interval_rejected() {
    let mut tape = Tape::new();
    let p = tape.leaf(t(&[1, 4], vec![0.5, 0.5, 0.1, 0.1]));
    let g = [b(0.5, 0.5, 0.1, 0.1)];
    assert!(tape
        .focaler_eiou(p, &g, FocalerParams { d: 0.6, u: 0.5 })
        .is_err());
}

// ---- total ----

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(total_loss(1.0, 1.0, 1.0, w), 9.0);
    assert_eq!(total_loss(0.0, 0.0, 0.0, w), 0.0);
    assert_eq!(
        total_loss(0.6, 1.4, 0.2, w) * 2.0,
        total_loss(1.2, 2.8, 0.4, w)
    );
}

#[test]
fn total_loss_gradient_is_weights() {
    let w = LossWeights {
        lambda_cls: 2.0,
        lambda_l1: 5.0,
        lambda_iou: 2.0,
    };
    let mut tape = Tape::new();
    let (a, l, g) = (
        tape.leaf(Tensor::scalar(0.3)),
        tape.leaf(Tensor::scalar(0.7)),
        tape.leaf(Tensor::scalar(1.1)),
    );
    let tot = tape.total_loss(a, l, g, w).unwrap();
    assert!((tape.value(tot).item() - total_loss(0.3, 0.7, 1.1, w)).abs() < 1e-15);
    let grads = tape.backward(tot).unwrap();
    assert_eq!(grads.wrt(a).item(), 2.0);
    assert_eq!(grads.wrt(l).item(), 5.0);
    assert_eq!(grads.wrt(g).item(), 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (p, g) = (random_box(&mut r), random_box(&mut r));
        let v = iou(&p, &g);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&g, &p));
    }

    #[test]
    fn total_loss_is_linear(c in 0.0f64..5.0, l in 0.0f64..5.0, g in 0.0f64..5.0, k in 0.0f64..4.0) {
        let w = LossWeights::default();
        let lhs = total_loss(k * c, k * l, k * g, w);
        prop_assert!((lhs - k * total_loss(c, l, g, w)).abs() < 1e-12);
    }
}
