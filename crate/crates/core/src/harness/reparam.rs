use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::params::{Activation, ParamStore};
use crate::pyramid::{repc3_forward, repconv_forward, RepC3Params, RepConvParams};
use crate::tensor::Tensor;

/// Largest accepted max-norm gap between the merged and multi-branch forms.
pub const REPARAM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ReparamRecord {
    pub trial: usize,
    pub block: &'static str,
    pub shape: Vec<usize>,
    pub max_abs_diff: f64,
    pub passed: bool,
}

/// Randomly sized RepConv (even trials) and RepC3 (odd trials) instances,
/// compared before and after deployment on random inputs.
pub fn verify_reparam(trials: usize, seed: u64) -> Result<Vec<ReparamRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e9a);
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let c = rng.random_range(1..=5);
        let (h, w) = (rng.random_range(2..=7), rng.random_range(2..=7));
        let x = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let mut store = ParamStore::new(rng.random());
        let (block, before, after) = if trial % 2 == 0 {
            let identity = rng.random_bool(0.5);
            let c_out = if identity { c } else { rng.random_range(1..=5) };
            let mut p = RepConvParams::new(&mut store, "rep", c, c_out, 1, identity)?;
            let before = repconv_forward(&x, &p, &store)?;
            p.deploy(&mut store);
            ("repconv", before, repconv_forward(&x, &p, &store)?)
        } else {
            let (c_out, hidden, n) = (
                rng.random_range(1..=5),
                rng.random_range(1..=4),
                rng.random_range(1..=3),
            );
            let mut p = RepC3Params::new(&mut store, "c3", c, c_out, hidden, n, Activation::Silu)?;
            let before = repc3_forward(&x, &p, &store)?;
            p.deploy(&mut store);
            ("repc3", before, repc3_forward(&x, &p, &store)?)
        };
        let d = before.max_abs_diff(&after);
        out.push(ReparamRecord {
            trial,
            block,
            shape: vec![c, h, w],
            max_abs_diff: d,
            passed: d <= REPARAM_TOL,
        });
    }
    Ok(out)
}
