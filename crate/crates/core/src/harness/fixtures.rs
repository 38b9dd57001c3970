//! Golden tensors for the cross-domain block.
//!
//! For each seed the input, every parameter and the oracle outputs of the
//! spatial branch, the frequency branch and the whole block are written in
//! the dump format. Files are a pure function of the seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfsb::CfsbParams;
use crate::dump;
use crate::error::Result;
use crate::oracle;
use crate::params::{Activation, ParamStore};
use crate::tensor::Tensor;

pub const FIXTURE_SEEDS: [u64; 3] = [0, 1, 2];
pub const FIXTURE_SHAPE: [usize; 3] = [4, 8, 8];

/// Input and parameters for one seed.
pub struct FixtureCase {
    pub seed: u64,
    pub input: Tensor,
    pub params: CfsbParams,
    pub store: ParamStore,
}

pub fn fixture_case(seed: u64) -> Result<FixtureCase> {
    let mut store = ParamStore::new(seed);
    let params = CfsbParams::new(&mut store, "cfsb", FIXTURE_SHAPE[0], Activation::Identity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF1C5);
    let input = Tensor::uniform(&FIXTURE_SHAPE, -1.0, 1.0, &mut rng);
    Ok(FixtureCase {
        seed,
        input,
        params,
        store,
    })
}

/// `(stem, tensor)` for the oracle outputs, in file order.
pub fn oracle_outputs(c: &FixtureCase) -> Vec<(&'static str, Tensor)> {
    vec![
        (
            "spatial",
            oracle::cfsb_spatial(&c.input, &c.params, &c.store),
        ),
        ("freq", oracle::cfsb_freq(&c.input, &c.params, &c.store)),
        ("out", oracle::cfsb(&c.input, &c.params, &c.store)),
    ]
}

/// `(file name, bytes)` of every fixture for `seed`.
pub fn fixture_files(seed: u64) -> Result<Vec<(String, Vec<u8>)>> {
    let c = fixture_case(seed)?;
    let mut files = vec![(format!("cfsb_s{seed}_input.fsd"), dump::encode(&c.input))];
    for e in c.store.entries() {
        files.push((
            format!("cfsb_s{seed}_param_{}.fsd", e.name),
            dump::encode(&e.value),
        ));
    }
    for (stem, t) in oracle_outputs(&c) {
        files.push((format!("cfsb_s{seed}_{stem}.fsd"), dump::encode(&t)));
    }
    Ok(files)
}

/// Writes the fixtures of every seed in [`FIXTURE_SEEDS`] into `dir`.
pub fn write_fixtures(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for seed in FIXTURE_SEEDS {
        for (name, bytes) in fixture_files(seed)? {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            paths.push(p);
        }
    }
    Ok(paths)
}
