use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::model::count_params;
use crate::harness::train::{eval_scenes, scene_ap, train_toy, training_scenes};

/// Toggle sets `(shab, da_aifi, fsfpn_cfsb)` of the six ablation rows.
pub const ABLATION_TOGGLES: [(bool, bool, bool); 6] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, true, true),
];

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_loss: f64,
    /// AP on the scenes the model was trained on.
    pub ap: f64,
    /// AP on held-out scenes from the same generator.
    pub heldout_ap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub exp: usize,
    pub shab: bool,
    pub da_aifi: bool,
    pub fsfpn_cfsb: bool,
    pub params: usize,
    pub runs: Vec<SeedResult>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

impl AblationRow {
    pub fn mean_final_loss(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.final_loss))
    }

    pub fn mean_ap(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.ap))
    }

    pub fn mean_heldout_ap(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.heldout_ap))
    }
}

/// Trains and evaluates one toggle set for seeds `base.seed, base.seed+1, …`.
pub fn run_row(
    base: &RunConfig,
    exp: usize,
    toggles: (bool, bool, bool),
    seeds: usize,
) -> Result<AblationRow> {
    let (s, a, f) = toggles;
    let cfg = base.with_toggles(s, a, f);
    let mut runs = Vec::with_capacity(seeds);
    for k in 0..seeds as u64 {
        let c = RunConfig {
            seed: base.seed + k,
            ..cfg.clone()
        };
        let out = train_toy(&c)?;
        runs.push(SeedResult {
            seed: c.seed,
            final_loss: out.final_smoothed(c.smooth_window),
            ap: scene_ap(&out, &training_scenes(&c)?)?,
            heldout_ap: scene_ap(&out, &eval_scenes(&c)?)?,
        });
    }
    Ok(AblationRow {
        exp,
        shab: s,
        da_aifi: a,
        fsfpn_cfsb: f,
        params: count_params(&cfg)?,
        runs,
    })
}

/// All six rows, in order.
pub fn run_ablation(base: &RunConfig, seeds: usize) -> Result<Vec<AblationRow>> {
    ABLATION_TOGGLES
        .iter()
        .enumerate()
        .map(|(i, &t)| run_row(base, i + 1, t, seeds))
        .collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "on"
    } else {
        "-"
    }
}

/// Fixed-width comparison table.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<5} {:<5} {:<7} {:<10} {:>10} {:>8} {:>11} {:>8}\n",
        "exp", "shab", "da_aifi", "fsfpn_cfsb", "final_loss", "ap", "heldout_ap", "params"
    );
    for r in rows {
        s += &format!(
            "{:<5} {:<5} {:<7} {:<10} {:>10.4} {:>8.4} {:>11.4} {:>8}\n",
            r.exp,
            mark(r.shab),
            mark(r.da_aifi),
            mark(r.fsfpn_cfsb),
            r.mean_final_loss(),
            r.mean_ap(),
            r.mean_heldout_ap(),
            r.params
        );
    }
    s
}

/// One JSON object per row.
pub fn write_rows_jsonl<W: Write>(mut w: W, rows: &[AblationRow]) -> Result<()> {
    for r in rows {
        let mut v = serde_json::to_value(r)?;
        v["mean_final_loss"] = r.mean_final_loss().into();
        v["mean_ap"] = r.mean_ap().into();
        v["mean_heldout_ap"] = r.mean_heldout_ap().into();
        writeln!(w, "{v}")?;
    }
    Ok(())
}
