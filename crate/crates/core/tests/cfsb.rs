mod common;

use common::*;
use fsdet_core::cfsb::{cfsb_forward, cfsb_spatial_branch, scharr_grad, CfsbParams, SCHARR_X};
use fsdet_core::spectral::cfsb_freq_branch;
use fsdet_core::{
    grad_check, oracle, Activation, Binding, GradCheckOptions, ParamStore, Tape, Tensor,
};
use proptest::prelude::*;

fn block(seed: u64, c: usize) -> (CfsbParams, ParamStore) {
    let mut store = ParamStore::new(seed);
    let p = CfsbParams::new(&mut store, "b", c, Activation::Identity).unwrap();
    (p, store)
}

fn interior(x: &Tensor, margin: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        for i in margin..h - margin {
            for j in margin..w - margin {
                out.push(x.at(&[ch, i, j]));
            }
        }
    }
    out
}

fn transpose_hw(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[c, w, h], |i| {
        let (ch, r, q) = (i / (w * h), (i / h) % w, i % h);
        x.at(&[ch, q, r])
    })
}

fn flip_w(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        x.at(&[i / (h * w), (i / w) % h, w - 1 - i % w])
    })
}

fn gx(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.depthwise_fixed3x3(v, SCHARR_X).unwrap();
    tape.value(y).clone()
}

#[test]
fn scharr_of_constant_is_zero_inside() {
    let y = scharr_grad(&Tensor::full(&[2, 5, 6], 3.0)).unwrap();
    assert!(interior(&y, 1).iter().all(|&v| v == 0.0));
}

#[test]
fn scharr_on_horizontal_ramp() {
    let x = Tensor::from_fn(&[1, 5, 6], |i| (i % 6) as f64);
    assert!(interior(&gx(&x), 1).iter().all(|&v| v == 32.0));
    assert!(interior(&scharr_grad(&x).unwrap(), 1)
        .iter()
        .all(|&v| v == 32.0));
}

#[test]
fn scharr_matches_oracle_with_borders() {
    let x = rand_t(&[3, 5, 7], &mut rng(1));
    assert_close(&scharr_grad(&x).unwrap(), &oracle::scharr(&x), 1e-12);
}

#[test]
fn spatial_branch_zero_conv1_is_conv2_of_input() {
    let (p, mut store) = block(1, 3);
    p.spatial_conv1.set_zero(&mut store).unwrap();
    let x = rand_t(&[3, 5, 5], &mut rng(2));
    let want = oracle::conv(&x, &p.spatial_conv2, &store);
    assert_close(&cfsb_spatial_branch(&x, &p, &store).unwrap(), &want, 1e-12);
}

#[test]
fn spatial_branch_constant_input_passes_through() {
    let (p, mut store) = block(2, 2);
    store
        .set(p.spatial_conv1.bias.unwrap(), Tensor::zeros(&[2]))
        .unwrap();
    p.spatial_conv2.set_identity(&mut store).unwrap();
    let x = Tensor::full(&[2, 7, 7], -1.25);
    let y = cfsb_spatial_branch(&x, &p, &store).unwrap();
    // conv1 sees the border response of the zero-padded gradient up to two pixels in
    for v in interior(&y, 2) {
        assert!((v + 1.25).abs() < 1e-12);
    }
}

#[test]
fn spatial_branch_matches_composition() {
    let (p, store) = block(3, 4);
    let x = rand_t(&[4, 6, 5], &mut rng(3));
    let g = oracle::scharr(&x);
    let c1 = oracle::conv2d(
        &g,
        store.get(p.spatial_conv1.weight),
        Some(store.get(p.spatial_conv1.bias.unwrap())),
        1,
        1,
    );
    let r = c1.add(&x).unwrap();
    let want = oracle::conv2d(
        &r,
        store.get(p.spatial_conv2.weight),
        Some(store.get(p.spatial_conv2.bias.unwrap())),
        1,
        1,
    );
    assert_close(&cfsb_spatial_branch(&x, &p, &store).unwrap(), &want, 1e-12);
}

#[test]
fn all_zero_block_outputs_zero() {
    let (p, mut store) = block(4, 3);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let y = cfsb_forward(&rand_t(&[3, 4, 4], &mut rng(4)), &p, &store).unwrap();
    assert_eq!(y, Tensor::zeros(&[3, 4, 4]));
}

#[test]
fn identity_branches_with_half_fuse_return_input() {
    let (p, mut store) = block(5, 3);
    p.spatial_conv1.set_zero(&mut store).unwrap();
    p.spatial_conv2.set_identity(&mut store).unwrap();
    p.freq.filter.mask.set_identity(&mut store).unwrap();
    p.freq.outer.set_identity(&mut store).unwrap();
    p.fuse.set_identity(&mut store).unwrap();
    let half = store.get(p.fuse.weight).scale(0.5);
    store.set(p.fuse.weight, half).unwrap();
    let x = rand_t(&[3, 8, 6], &mut rng(5));
    assert_close(&cfsb_forward(&x, &p, &store).unwrap(), &x, 1e-10);
}

#[test]
fn block_matches_composition() {
    let (p, store) = block(6, 4);
    let x = rand_t(&[4, 8, 8], &mut rng(6));
    let spatial = cfsb_spatial_branch(&x, &p, &store).unwrap();
    let (re, im) = direct_dft(&x);
    let f = pointwise(
        &Tensor::cat0(&[&re, &im]).unwrap(),
        &p.freq.filter.mask,
        &store,
    );
    let freq = pointwise(
        &direct_idft(&f.narrow0(0, 4).unwrap(), &f.narrow0(4, 4).unwrap()),
        &p.freq.outer,
        &store,
    );
    let want = pointwise(&spatial.add(&freq).unwrap(), &p.fuse, &store);
    assert_close(&cfsb_forward(&x, &p, &store).unwrap(), &want, 1e-9);
}

#[test]
fn zeroed_frequency_path_leaves_fused_spatial_branch() {
    let (p, mut store) = block(7, 3);
    p.freq.filter.mask.set_zero(&mut store).unwrap();
    p.freq.outer.set_zero(&mut store).unwrap();
    let x = rand_t(&[3, 5, 5], &mut rng(7));
    let want = oracle::conv(
        &cfsb_spatial_branch(&x, &p, &store).unwrap(),
        &p.fuse,
        &store,
    );
    assert_close(&cfsb_forward(&x, &p, &store).unwrap(), &want, 1e-12);
}

#[test]
fn zeroed_conv1_keeps_residual_contribution() {
    let (p, mut store) = block(8, 3);
    p.spatial_conv1.set_zero(&mut store).unwrap();
    let x = rand_t(&[3, 5, 5], &mut rng(8));
    let spatial = oracle::conv(&x, &p.spatial_conv2, &store);
    let freq = cfsb_freq_branch(&x, &p.freq, &store).unwrap();
    let want = oracle::conv(&spatial.add(&freq).unwrap(), &p.fuse, &store);
    let got = cfsb_forward(&x, &p, &store).unwrap();
    assert_close(&got, &want, 1e-10);
    assert!(got.max_abs() > 1e-3);
}

#[test]
fn block_passes_grad_check() {
    let (p, store) = block(9, 2);
    let mut inputs = vec![rand_t(&[2, 4, 4], &mut rng(9))];
    inputs.extend(store.values());
    let rep = grad_check(
        |tape, v| p.forward(tape, &Binding::from_vars(v[1..].to_vec()), v[0]),
        &inputs,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_err() < 1e-4, "{}", rep.max_rel_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_is_preserved(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7) {
        let (p, store) = block(seed, c);
        let y = cfsb_forward(&rand_t(&[c, h, w], &mut rng(seed)), &p, &store).unwrap();
        prop_assert_eq!(y.shape(), &[c, h, w]);
    }

    #[test]
    fn scharr_transposes_with_input(seed in any::<u64>(), h in 3usize..8, w in 3usize..8) {
        let x = rand_t(&[2, h, w], &mut rng(seed));
        let a = scharr_grad(&transpose_hw(&x)).unwrap();
        let b = transpose_hw(&scharr_grad(&x).unwrap());
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn horizontal_gradient_flips_sign(seed in any::<u64>(), h in 3usize..8, w in 3usize..8) {
        let x = rand_t(&[2, h, w], &mut rng(seed));
        let a = interior(&flip_w(&gx(&x)), 1);
        let b = interior(&gx(&flip_w(&x)), 1);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p + q).abs() < 1e-12);
        }
    }
}
