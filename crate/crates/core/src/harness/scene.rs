use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::tensor::Tensor;

/// Boxes with per-box class and confidence. Ground truth uses score 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BoxSet {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

impl BoxSet {
    pub fn new() -> Self {
        BoxSet::default()
    }

    pub fn push(&mut self, b: BBox, score: f64, class: usize) {
        self.boxes.push(b);
        self.scores.push(score);
        self.classes.push(class);
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Indices ordered by score, highest first; ties keep index order.
    pub fn order_by_score(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Writes `scene,class,score,cx,cy,w,h` rows with a header.
pub fn write_boxsets_csv<W: Write>(mut w: W, sets: &[BoxSet]) -> Result<()> {
    writeln!(w, "scene,class,score,cx,cy,w,h")?;
    for (s, set) in sets.iter().enumerate() {
        for i in 0..set.len() {
            let b = &set.boxes[i];
            writeln!(
                w,
                "{s},{},{},{},{},{},{}",
                set.classes[i], set.scores[i], b.cx, b.cy, b.w, b.h
            )?;
        }
    }
    Ok(())
}

/// Reads the format written by [`write_boxsets_csv`]. Scenes are numbered
/// densely from zero; scenes without rows come back empty.
pub fn read_boxsets_csv<R: BufRead>(r: R) -> Result<Vec<BoxSet>> {
    let mut sets: Vec<BoxSet> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("scene")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || {
            Error::Format(format!(
                "line {}: expected scene,class,score,cx,cy,w,h, got {line:?}",
                n + 1
            ))
        };
        if f.len() != 7 {
            return Err(bad());
        }
        let scene: usize = f[0].parse().map_err(|_| bad())?;
        let class: usize = f[1].parse().map_err(|_| bad())?;
        let nums: Vec<f64> = f[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let b = BBox::new(nums[1], nums[2], nums[3], nums[4])
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if sets.len() <= scene {
            sets.resize_with(scene + 1, BoxSet::new);
        }
        sets[scene].push(b, nums[0], class);
    }
    Ok(sets)
}

#[derive(Clone, Debug)]
pub struct Scene {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub gt: BoxSet,
    pub seed: u64,
    /// Objects asked for; `gt.len()` may be smaller when placement failed.
    pub requested: usize,
}

const PLACEMENT_TRIES: usize = 200;

/// Bright axis-aligned rectangles with jittered intensity on a textured
/// noisy background. Objects never overlap (one pixel gap) and their boxes
/// are the exact pixel footprints.
pub fn gen_synthetic_scene(
    seed: u64,
    n_objects: usize,
    size_range_px: (usize, usize),
    canvas: usize,
) -> Result<Scene> {
    let (lo, hi) = size_range_px;
    if lo == 0 || lo > hi || hi >= canvas {
        return Err(Error::InvalidArgument(format!(
            "object sizes {lo}..={hi} px do not fit a {canvas}×{canvas} canvas"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4E);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let (fx, fy, phase): (f64, f64, f64) = (
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
        rng.random_range(0.0..6.3),
    );
    let tint: [f64; 3] = [
        rng.random_range(0.15..0.3),
        rng.random_range(0.15..0.3),
        rng.random_range(0.15..0.3),
    ];
    let n = canvas * canvas;
    let mut img = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..canvas {
            for j in 0..canvas {
                let texture =
                    0.08 * ((i as f64 * fy + phase).sin() * (j as f64 * fx + c as f64).cos());
                img[c * n + i * canvas + j] = tint[c] + texture + noise.sample(&mut rng);
            }
        }
    }

    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut gt = BoxSet::new();
    for _ in 0..n_objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=canvas - w);
            let y0 = rng.random_range(0..=canvas - h);
            let clear = rects.iter().all(|&(rx, ry, rw, rh)| {
                x0 + w + 1 <= rx || rx + rw + 1 <= x0 || y0 + h + 1 <= ry || ry + rh + 1 <= y0
            });
            if clear {
                placed = Some((x0, y0, w, h));
                break;
            }
        }
        let Some((x0, y0, w, h)) = placed else {
            continue;
        };
        let level: f64 = rng.random_range(0.65..1.0);
        for c in 0..3 {
            let v = level * rng.random_range(0.85..1.0);
            for i in y0..y0 + h {
                for j in x0..x0 + w {
                    img[c * n + i * canvas + j] = v + 0.5 * noise.sample(&mut rng);
                }
            }
        }
        rects.push((x0, y0, w, h));
        let s = canvas as f64;
        gt.push(
            BBox::new(
                (x0 as f64 + w as f64 / 2.0) / s,
                (y0 as f64 + h as f64 / 2.0) / s,
                w as f64 / s,
                h as f64 / s,
            )?,
            1.0,
            0,
        );
    }
    Ok(Scene {
        image: Tensor::new(vec![3, canvas, canvas], img)?,
        gt,
        seed,
        requested: n_objects,
    })
}
