//! The direct perturbed-argmax estimator approaches the exact gradient as
//! epsilon shrinks. Averages many draws on a tiny random model and reports
//! the cosine to the enumerated gradient.

use argmaxgrad::estimators::{direct_gradient, repeat_rows, unbiased_gradient};
use argmaxgrad::gumbel::{GumbelDraw, NoiseStream};
use argmaxgrad::tensor::{Activation, LayerSpec, MlpParams, Tensor};
use rand::SeedableRng;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

fn main() -> argmaxgrad::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let enc = MlpParams::init(&[LayerSpec::new(6, 4, Activation::Identity)], &mut rng)?;
    let dec = MlpParams::init(&[LayerSpec::new(4, 6, Activation::Identity)], &mut rng)?;
    let x = Tensor::matrix(2, 6, vec![1., 0., 1., 1., 0., 0., 0., 1., 0., 1., 1., 0.])?;
    let exact = unbiased_gradient(&enc, &dec, &x)?.encoder.flatten();
    let reps = 100_000;
    let xr = repeat_rows(&x, reps);
    for eps in [3.0, 1.0, 0.3, 0.1, 0.03] {
        let gamma = GumbelDraw::sample(xr.rows(), 4, &mut NoiseStream::new(7, 0));
        let est = direct_gradient(&enc, &dec, &xr, &gamma, eps)?.encoder.flatten();
        println!("eps {eps:<5} encoder cosine to exact {:.4}", cosine(&est, &exact));
    }
    Ok(())
}
