//! Finite-difference gradient checks for every attention block and the
//! encoder layer. The composed model variants are checked by the acceptance
//! suite at full breadth.

use mtsc_core::attention::{
    AttentionConfig, CtaBlock, EncoderLayer, GtaBlock, PositionalEncoding, SaBlock, ScalingMode,
    TpsBlock,
};
use mtsc_core::tensor::{Initializer, Parameter, Tensor};
use mtsc_core::verify::gradcheck_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Check `params` of a block against finite differences of a fixed random
/// readout of `forward`'s output.
fn check_block<F>(name: &str, params: Vec<Parameter>, forward: F, seed: u64)
where
    F: Fn() -> Tensor,
{
    let probe = forward();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let readout: Vec<f64> = (0..probe.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = Tensor::new(probe.shape().to_vec(), readout).unwrap();
    let loss = || -> mtsc_core::Result<f64> { Ok(forward().mul(&r)?.sum().item()) };

    for p in &params {
        p.tensor.zero_grad();
    }
    forward().mul(&r).unwrap().sum().backward().unwrap();
    let autodiff: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let report = gradcheck_params(&params, &autodiff, loss, STEP, TOL, 64).unwrap();
    assert!(
        report.pass,
        "{name}: max rel err {:.3e}\n{:#?}",
        report.max_rel_err(),
        report.entries.iter().filter(|e| !e.failing.is_empty()).collect::<Vec<_>>()
    );
}

fn input(seed: u64, shape: Vec<usize>) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn cta_block_gradients() {
    let mut init = Initializer::new(1);
    let block = CtaBlock::new(&mut init, 6, 2);
    let f = input(11, vec![6, 10]);
    let mut params = Vec::new();
    block.collect("cta", &mut params);
    check_block("cta", params, || block.forward(&f).unwrap().0, 21);
}

#[test]
fn gta_block_gradients() {
    let mut init = Initializer::new(2);
    let block = GtaBlock::new(&mut init, 5, 12, 4);
    let f = input(12, vec![5, 12]);
    let mut params = Vec::new();
    block.collect("gta", &mut params);
    check_block("gta", params, || block.forward(&f).unwrap().0, 22);
}

#[test]
fn sa_block_gradients() {
    let mut init = Initializer::new(3);
    let block = SaBlock::new(&mut init, 6, 2);
    let f = input(13, vec![9, 6]);
    let mut params = Vec::new();
    block.collect("sa", &mut params);
    check_block("sa", params, || block.forward(&f).unwrap().output, 23);
}

#[test]
fn tps_block_gradients() {
    let cfg = AttentionConfig { d: 6, ..AttentionConfig::default() };
    let mut init = Initializer::new(4);
    let block = TpsBlock::new(&mut init, &cfg);
    let f = input(14, vec![8, 6]);
    let mut params = Vec::new();
    block.collect("tps", &mut params);
    check_block("tps", params, || block.forward(&f).unwrap().output, 24);
}

#[test]
fn tps_block_gradients_with_learnable_scale_and_squared_distance() {
    let cfg = AttentionConfig {
        d: 4,
        heads: 2,
        scaling: ScalingMode::LearnableScalar,
        squared_distance: true,
        ..AttentionConfig::default()
    };
    let mut init = Initializer::new(5);
    let block = TpsBlock::new(&mut init, &cfg);
    let f = input(15, vec![7, 4]);
    let mut params = Vec::new();
    block.collect("tps", &mut params);
    check_block("tps-scaled", params, || block.forward(&f).unwrap().output, 25);
}

#[test]
fn positional_encoding_gradients() {
    let mut init = Initializer::new(6);
    let pe = PositionalEncoding::new(&mut init, 12, 5);
    let f = input(16, vec![9, 5]);
    let mut params = Vec::new();
    pe.collect("pe", &mut params);
    check_block("pe", params, || pe.apply(&f).unwrap(), 26);
}

#[test]
fn encoder_layer_gradients() {
    for tps in [false, true] {
        let cfg = AttentionConfig { d: 6, ..AttentionConfig::default() };
        let mut init = Initializer::new(7);
        let enc = EncoderLayer::new(&mut init, &cfg, tps);
        let f = input(17, vec![8, 6]);
        let mut params = Vec::new();
        enc.collect("enc", &mut params);
        check_block(
            if tps { "encoder-tps" } else { "encoder-sa" },
            params,
            || enc.forward(&f).unwrap(),
            27,
        );
    }
}
