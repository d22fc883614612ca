//! Cross-implementation equivalence: the vectorized attention blocks against
//! the scalar-loop oracles, over seeded random weights and inputs.

use mtsc_core::attention::{AttentionConfig, CtaBlock, GtaBlock, SaBlock, TpsBlock};
use mtsc_core::tensor::{Initializer, Tensor};
use mtsc_core::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn fill(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

fn assert_close(got: &[f64], want: &[f64], what: &str, seed: u64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() < TOL,
            "{what} diverges at {i} (seed {seed}): {g} vs {w}"
        );
    }
}

/// Shapes used by one equivalence case; kept small so the oracle loops stay
/// readable and fast.
fn case_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=8), rng.gen_range(2..=16)) // (d, n)
}

pub fn check_cta(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = case_dims(&mut rng);
    let mut init = Initializer::new(seed ^ 0xc1a);
    let block = CtaBlock::new(&mut init, d, 2);
    let d_r = block.bottleneck();
    block.w1.data_mut().copy_from_slice(&fill(&mut rng, d_r * d));
    block.w2.data_mut().copy_from_slice(&fill(&mut rng, d_r));
    let f_data = fill(&mut rng, d * n);
    let f = Tensor::new(vec![d, n], f_data.clone()).unwrap();
    let (o, a) = block.forward(&f).unwrap();
    let (o_ref, a_ref) = verify::oracle_cta(
        &block.w1.to_vec(),
        &block.w2.to_vec(),
        &f_data,
        d,
        d_r,
        n,
    );
    assert_close(&o.to_vec(), &o_ref, "cta output", seed);
    assert_close(&a.to_vec(), &a_ref, "cta attention", seed);
}

pub fn check_gta(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, t) = case_dims(&mut rng);
    let mut init = Initializer::new(seed ^ 0x67a);
    let block = GtaBlock::new(&mut init, d, t, 4);
    let t_r = block.bottleneck();
    block.w1.data_mut().copy_from_slice(&fill(&mut rng, d));
    block.w2.data_mut().copy_from_slice(&fill(&mut rng, t_r * t));
    block.w3.data_mut().copy_from_slice(&fill(&mut rng, t * t_r));
    let f_data = fill(&mut rng, d * t);
    let f = Tensor::new(vec![d, t], f_data.clone()).unwrap();
    let (o, a) = block.forward(&f).unwrap();
    let (o_ref, a_ref) = verify::oracle_gta(
        &block.w1.to_vec(),
        &block.w2.to_vec(),
        &block.w3.to_vec(),
        &f_data,
        d,
        t,
        t_r,
    );
    assert_close(&o.to_vec(), &o_ref, "gta output", seed);
    assert_close(&a.to_vec(), &a_ref, "gta attention", seed);
    // The gate stays strictly inside (0, 1).
    assert!(a.to_vec().iter().all(|&x| x > 0.0 && x < 1.0));
}

pub fn check_sa(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = case_dims(&mut rng);
    let mut init = Initializer::new(seed ^ 0x5a);
    let block = SaBlock::new(&mut init, d, 1);
    block.wq.data_mut().copy_from_slice(&fill(&mut rng, d * d));
    block.wk.data_mut().copy_from_slice(&fill(&mut rng, d * d));
    block.wv.data_mut().copy_from_slice(&fill(&mut rng, d * d));
    let f_data = fill(&mut rng, n * d);
    let f = Tensor::new(vec![n, d], f_data.clone()).unwrap();
    let out = block.forward(&f).unwrap();
    let (o_ref, a_ref) = verify::oracle_sa(
        &block.wk.to_vec(),
        &block.wq.to_vec(),
        &block.wv.to_vec(),
        &f_data,
        n,
        d,
    );
    assert_close(&out.output.to_vec(), &o_ref, "sa output", seed);
    assert_close(&out.attention[0].to_vec(), &a_ref, "sa attention", seed);
}

pub fn check_tps(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = case_dims(&mut rng);
    let cfg = AttentionConfig { d, sigma_floor: 0.5 + (seed % 3) as f64 * 0.5, ..AttentionConfig::default() };
    let mut init = Initializer::new(seed ^ 0x795);
    let block = TpsBlock::new(&mut init, &cfg);
    block.sa.wq.data_mut().copy_from_slice(&fill(&mut rng, d * d));
    block.sa.wk.data_mut().copy_from_slice(&fill(&mut rng, d * d));
    block.sa.wv.data_mut().copy_from_slice(&fill(&mut rng, d * d));
    block.w_sigma.data_mut().copy_from_slice(&fill(&mut rng, d));
    block.w_sigma_hat.data_mut().copy_from_slice(&fill(&mut rng, d));
    let f_data = fill(&mut rng, n * d);
    let f = Tensor::new(vec![n, d], f_data.clone()).unwrap();
    let out = block.forward(&f).unwrap();
    let reference = verify::oracle_tps(
        &block.sa.wk.to_vec(),
        &block.sa.wq.to_vec(),
        &block.sa.wv.to_vec(),
        &block.w_sigma.to_vec(),
        &block.w_sigma_hat.to_vec(),
        cfg.sigma_floor,
        false,
        &f_data,
        n,
        d,
    );
    assert_close(&out.output.to_vec(), &reference.o, "tps output", seed);
    assert_close(&out.attention[0].to_vec(), &reference.a, "tps attention", seed);
    assert_close(&out.base_attention[0].to_vec(), &reference.a1, "tps base attention", seed);
    assert_close(&out.pseudo_gaussian.to_vec(), &reference.a2, "tps pseudo-gaussian", seed);
    assert_close(&out.sigma.to_vec(), &reference.sigma, "tps sigma", seed);
    assert_close(&out.sigma_hat.to_vec(), &reference.sigma_hat, "tps sigma-hat", seed);
}

#[test]
fn cta_matches_oracle() {
    for seed in 0..25 {
        check_cta(seed);
    }
}

#[test]
fn gta_matches_oracle() {
    for seed in 0..25 {
        check_gta(seed);
    }
}

#[test]
fn sa_matches_oracle() {
    for seed in 0..25 {
        check_sa(seed);
    }
}

#[test]
fn tps_matches_oracle() {
    for seed in 0..25 {
        check_tps(seed);
    }
}
