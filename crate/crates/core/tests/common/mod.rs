//! Shared helpers and independent reference implementations for the
//! integration tests. Nothing here calls the tape.

#![allow(dead_code)]

use std::f64::consts::PI;

use fsdet_core::attention::{DeformAttnParams, ShsaParams};
use fsdet_core::harness::BoxSet;
use fsdet_core::losses::iou;
use fsdet_core::{ConvParams, LinearParams, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

pub fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[track_caller]
pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} exceeds {tol:e}");
}

/// Overwrites a parameter with `value`.
pub fn set(store: &mut ParamStore, id: fsdet_core::ParamId, value: Tensor) {
    store.set(id, value).unwrap();
}

pub fn zero_conv(store: &mut ParamStore, c: &ConvParams) {
    c.set_zero(store).unwrap();
}

/// Direct 2D DFT by a four-fold loop: `(real, imag)`.
pub fn direct_dft(x: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut re = vec![0.0; c * h * w];
    let mut im = vec![0.0; c * h * w];
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for i in 0..h {
                    for j in 0..w {
                        let ang =
                            -2.0 * PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                        let val = x.at(&[ch, i, j]);
                        sr += val * ang.cos();
                        si += val * ang.sin();
                    }
                }
                re[(ch * h + u) * w + v] = sr;
                im[(ch * h + u) * w + v] = si;
            }
        }
    }
    (t(&[c, h, w], re), t(&[c, h, w], im))
}

/// Real part of the normalized inverse by a four-fold loop.
pub fn direct_idft(re: &Tensor, im: &Tensor) -> Tensor {
    let (c, h, w) = (re.shape()[0], re.shape()[1], re.shape()[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let ang =
                            2.0 * PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                        acc += re.at(&[ch, u, v]) * ang.cos() - im.at(&[ch, u, v]) * ang.sin();
                    }
                }
                out[(ch * h + i) * w + j] = acc / (h * w) as f64;
            }
        }
    }
    t(&[c, h, w], out)
}

/// Bilinear read at pixel coordinates `(x, y)` from explicit corner weights,
/// zero outside the map.
pub fn corner_sample(f: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    (0..c)
        .map(|ch| {
            corners
                .iter()
                .filter(|(cx, cy, _)| *cx >= 0.0 && *cy >= 0.0 && *cx < w as f64 && *cy < h as f64)
                .map(|&(cx, cy, wt)| wt * f.at(&[ch, cy as usize, cx as usize]))
                .sum()
        })
        .collect()
}

/// Rows `x·W + b` for a linear layer with `W [d_in, d_out]`.
pub fn linear_rows(rows: &[Vec<f64>], p: &LinearParams, store: &ParamStore) -> Vec<Vec<f64>> {
    let (w, b) = (store.get(p.weight), store.get(p.bias));
    rows.iter()
        .map(|r| {
            (0..p.d_out)
                .map(|o| b.data()[o] + (0..p.d_in).map(|i| r[i] * w.at(&[i, o])).sum::<f64>())
                .collect()
        })
        .collect()
}

/// 1×1 convolution on `[C, H, W]` by loops.
pub fn pointwise(x: &Tensor, p: &ConvParams, store: &ParamStore) -> Tensor {
    assert_eq!(p.k, 1);
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let wt = store.get(p.weight);
    let mut out = vec![0.0; p.c_out * h * w];
    for o in 0..p.c_out {
        for s in 0..h * w {
            let mut acc = p.bias.map_or(0.0, |b| store.get(b).data()[o]);
            for i in 0..c {
                acc += wt.at(&[o, i, 0, 0]) * x.data()[i * h * w + s];
            }
            out[o * h * w + s] = acc;
        }
    }
    t(&[p.c_out, h, w], out)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Split attention with the full `N×N` weight matrix materialized.
pub fn dense_shsa(x: &Tensor, p: &ShsaParams, store: &ParamStore) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (half, d, n) = (c / 2, p.d_attn, h * w);
    let first = x.narrow0(0, half).unwrap();
    let qkv = pointwise(&first, &p.qkv, store);
    let at = |row: usize, tok: usize| qkv.data()[row * n + tok];
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![vec![0.0; n]; n];
    for (i, wrow) in weights.iter_mut().enumerate() {
        let scores: Vec<f64> = (0..n)
            .map(|j| scale * (0..d).map(|k| at(k, i) * at(d + k, j)).sum::<f64>())
            .collect();
        *wrow = softmax(&scores);
    }
    let mut mixed = vec![0.0; d * n];
    for k in 0..d {
        for i in 0..n {
            mixed[k * n + i] = (0..n).map(|j| weights[i][j] * at(2 * d + k, j)).sum();
        }
    }
    let mut cat = mixed;
    cat.extend_from_slice(&x.data()[half * n..]);
    pointwise(&t(&[d + half, h, w], cat), &p.out_proj, store)
}

/// Deformable attention unrolled over queries, heads and points.
pub fn unrolled_deform(
    queries: &Tensor,
    refs: &Tensor,
    value_map: &Tensor,
    p: &DeformAttnParams,
    store: &ParamStore,
) -> Tensor {
    let (n, d) = (queries.shape()[0], queries.shape()[1]);
    let (m, k) = (p.heads, p.points);
    let dh = d / m;
    let (h, w) = (value_map.shape()[1], value_map.shape()[2]);
    let value = pointwise(value_map, &p.value_proj, store);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| queries.data()[i * d..(i + 1) * d].to_vec())
        .collect();
    let offs = linear_rows(&rows, &p.offset_head, store);
    let logits = linear_rows(&rows, &p.weight_head, store);
    let mut cat = vec![vec![0.0; d]; n];
    for q in 0..n {
        for head in 0..m {
            let a = softmax(&logits[q][head * k..(head + 1) * k]);
            let vh = value.narrow0(head * dh, dh).unwrap();
            for pt in 0..k {
                let o = 2 * (head * k + pt);
                let x = (refs.at(&[q, 0]) + offs[q][o]) * w as f64 - 0.5;
                let y = (refs.at(&[q, 1]) + offs[q][o + 1]) * h as f64 - 0.5;
                let s = corner_sample(&vh, x, y);
                for ch in 0..dh {
                    cat[q][head * dh + ch] += a[pt] * s[ch];
                }
            }
        }
    }
    let out = linear_rows(&cat, &p.output_proj, store);
    t(&[n, d], out.concat())
}

/// All injective assignments in which each prediction, visited in score
/// order, takes nothing or an unclaimed ground truth at IoU ≥ `thr`. The
/// winner maximizes the IoU sequence lexicographically, which is the greedy
/// rule stated as an optimization.
pub fn exhaustive_greedy(preds: &BoxSet, gts: &BoxSet, thr: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds.scores[b]
            .partial_cmp(&preds.scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut best: Option<(Vec<f64>, Vec<(usize, usize)>)> = None;
    fn rec(
        i: usize,
        order: &[usize],
        preds: &BoxSet,
        gts: &BoxSet,
        thr: f64,
        used: &mut Vec<bool>,
        key: &mut Vec<f64>,
        pairs: &mut Vec<(usize, usize)>,
        best: &mut Option<(Vec<f64>, Vec<(usize, usize)>)>,
    ) {
        if i == order.len() {
            let better = match best {
                None => true,
                Some((k, _)) => key
                    .iter()
                    .zip(k.iter())
                    .find(|(a, b)| a != b)
                    .is_some_and(|(a, b)| a > b),
            };
            if better {
                *best = Some((key.clone(), pairs.clone()));
            }
            return;
        }
        let p = order[i];
        key.push(-1.0);
        rec(i + 1, order, preds, gts, thr, used, key, pairs, best);
        key.pop();
        for g in 0..gts.len() {
            let v = iou(&preds.boxes[p], &gts.boxes[g]);
            if used[g] || v < thr {
                continue;
            }
            used[g] = true;
            key.push(v);
            pairs.push((p, g));
            rec(i + 1, order, preds, gts, thr, used, key, pairs, best);
            pairs.pop();
            key.pop();
            used[g] = false;
        }
    }
    let mut used = vec![false; gts.len()];
    rec(
        0,
        &order,
        preds,
        gts,
        thr,
        &mut used,
        &mut Vec::new(),
        &mut Vec::new(),
        &mut best,
    );
    best.map(|(_, p)| p).unwrap_or_default()
}
