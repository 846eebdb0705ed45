//! A handful of labels aligns the encoder's argmax with the classes.
//! Trains on bars with and without 16 labeled images and reports the
//! argmax accuracy on held-out data.

use argmaxgrad::data::{synthetic_dataset, Split, SyntheticKind};
use argmaxgrad::dvae::{evaluate, DvaeModel, LatentSpec, ModelSpec, Supervision, TrainConfig, Trainer};
use argmaxgrad::estimators::EstimatorConfig;
use argmaxgrad::gumbel::NoiseStream;

fn main() -> argmaxgrad::Result<()> {
    let train = synthetic_dataset(SyntheticKind::Bars, 800, 1)?.dataset;
    let test = synthetic_dataset(SyntheticKind::Bars, 200, 2)?.dataset.with_split(Split::Test);
    // Two labeled images per class.
    let labeled = synthetic_dataset(SyntheticKind::Bars, 16, 3)?.dataset;
    let spec = ModelSpec::new(LatentSpec::Categorical { k: 8 }, 16, 32);
    for supervised in [false, true] {
        let mut cfg = TrainConfig::new(EstimatorConfig::direct(0.3));
        cfg.learning_rate = 3e-3;
        cfg.batch_size = 50;
        cfg.supervision = supervised.then_some(Supervision { labels: 16, weight: 1.0, interval: 1 });
        let mut trainer = Trainer::new(DvaeModel::new(&spec, &mut NoiseStream::new(0, 7))?, cfg)?;
        for epoch in 0..40 {
            trainer.run_epoch(&train, epoch, supervised.then_some(&labeled))?;
        }
        let r = evaluate(trainer.model(), &test, 1, &mut NoiseStream::new(0, 99))?;
        println!(
            "{:<14} test loss {:.3}, argmax accuracy {:.3}",
            if supervised { "16 labels" } else { "unsupervised" },
            r.loss,
            r.accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
