//! Bias and spread of the direct estimator across epsilon on a small
//! random model, next to the score-function and Gumbel-Softmax estimators.

use argmaxgrad::estimators::{bias_variance_profile, unbiased_gradient, EstimatorConfig, EstimatorKind, ProfileProblem};
use argmaxgrad::tensor::{Activation, LayerSpec, MlpParams, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> argmaxgrad::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let enc = MlpParams::init(
        &[LayerSpec::new(16, 12, Activation::Relu), LayerSpec::new(12, 5, Activation::Identity)],
        &mut rng,
    )?;
    let dec = MlpParams::init(
        &[LayerSpec::new(5, 12, Activation::Relu), LayerSpec::new(12, 16, Activation::Identity)],
        &mut rng,
    )?;
    let x = Tensor::matrix(20, 16, (0..320).map(|_| rng.gen_bool(0.3) as u8 as f64).collect())?;
    let reference = unbiased_gradient(&enc, &dec, &x)?.encoder;
    let problem = ProfileProblem { encoder: &enc, decoder: &dec, x: &x };
    let mut grid: Vec<EstimatorConfig> = [0.1, 0.3, 1.0, 3.0].iter().map(|&e| EstimatorConfig::direct(e)).collect();
    grid.push(EstimatorConfig::new(EstimatorKind::ScoreFunction));
    grid.push(EstimatorConfig::gsm(0.5));
    println!("{:<15} {:>6} {:>12} {:>12}", "estimator", "knob", "bias", "mean std");
    for s in bias_variance_profile(&problem, &grid, &reference, 2000, 5)? {
        println!("{:<15} {:>6} {:>12.4e} {:>12.4e}", s.variant.name(), s.knob, s.bias_l2, s.mean_std);
    }
    Ok(())
}
