//! Train a k=8 discrete VAE on the synthetic bars data with each gradient
//! estimator and compare test losses (ln 8 ~ 2.08 nats is the floor).

use argmaxgrad::data::{synthetic_dataset, Split, SyntheticKind};
use argmaxgrad::dvae::{evaluate, DvaeModel, LatentSpec, ModelSpec, TrainConfig, Trainer};
use argmaxgrad::estimators::{EstimatorConfig, EstimatorKind};
use argmaxgrad::gumbel::NoiseStream;

fn main() -> argmaxgrad::Result<()> {
    let train = synthetic_dataset(SyntheticKind::Bars, 800, 1)?.dataset;
    let test = synthetic_dataset(SyntheticKind::Bars, 200, 2)?.dataset.with_split(Split::Test);
    let spec = ModelSpec::new(LatentSpec::Categorical { k: 8 }, 16, 32);
    for est in [
        EstimatorConfig::new(EstimatorKind::UnbiasedEnum),
        EstimatorConfig::direct(0.1),
        EstimatorConfig::gsm(1.0),
        EstimatorConfig::new(EstimatorKind::ScoreFunction),
    ] {
        let model = DvaeModel::new(&spec, &mut NoiseStream::new(0, 7))?;
        let mut cfg = TrainConfig::new(est);
        cfg.learning_rate = 3e-3;
        cfg.batch_size = 50;
        let mut trainer = Trainer::new(model, cfg)?;
        for epoch in 0..60 {
            trainer.run_epoch(&train, epoch, None)?;
        }
        let r = evaluate(trainer.model(), &test, 10, &mut NoiseStream::new(0, 99))?;
        println!("{:<15} test loss {:.3} (se {:.3}), KL {:.3}", est.variant.name(), r.loss, r.loss_se, r.kl);
    }
    Ok(())
}
