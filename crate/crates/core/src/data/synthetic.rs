use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gumbel::NoiseStream;
use crate::tensor::Tensor;

/// Generator choice for [`synthetic_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SyntheticKind {
    /// 4x4 images with one full row (classes 0..4) or column (4..8) lit.
    Bars,
    /// Draws from a `components`-way Bernoulli mixture over `side x side`
    /// pixels; parameters are generated from the seed and returned.
    Mixture { components: usize, side: usize },
}

/// Ground truth of a Bernoulli mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    /// `components` rows of per-pixel success probabilities.
    pub means: Vec<Vec<f64>>,
}

impl MixtureParams {
    /// Expected image under the mixture.
    pub fn pixel_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.means[0].len()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, p) in out.iter_mut().zip(m) {
                *o += w * p;
            }
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub mixture: Option<MixtureParams>,
}

/// `n` synthetic images. Labels are the bar class or mixture component.
pub fn synthetic_dataset(kind: SyntheticKind, n: usize, seed: u64) -> Result<SyntheticData> {
    if n == 0 {
        return Err(Error::Contract("synthetic_dataset needs n >= 1".into()));
    }
    let mut rng = NoiseStream::new(seed, 0);
    match kind {
        SyntheticKind::Bars => {
            let mut labels: Vec<usize> = (0..n).map(|i| i % 8).collect();
            labels.shuffle(&mut rng);
            let mut data = vec![0.0; n * 16];
            for (r, &c) in labels.iter().enumerate() {
                let img = &mut data[r * 16..(r + 1) * 16];
                for t in 0..4 {
                    let p = if c < 4 { 4 * c + t } else { 4 * t + (c - 4) };
                    img[p] = 1.0;
                }
            }
            let dataset = Dataset::new(Tensor::matrix(n, 16, data)?, Some(labels), Split::Train, 4, 4)?;
            Ok(SyntheticData { dataset, mixture: None })
        }
        SyntheticKind::Mixture { components, side } => {
            if components == 0 || side == 0 {
                return Err(Error::Contract("mixture needs components >= 1 and side >= 1".into()));
            }
            let pixels = side * side;
            let raw: Vec<f64> = (0..components).map(|_| rng.gen_range(0.5..1.5)).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let means: Vec<Vec<f64>> = (0..components)
                .map(|_| (0..pixels).map(|_| rng.gen_range(0.05..0.95)).collect())
                .collect();
            let mut labels = Vec::with_capacity(n);
            let mut data = Vec::with_capacity(n * pixels);
            for _ in 0..n {
                let u: f64 = rng.gen();
                let mut c = 0;
                let mut acc = weights[0];
                while u >= acc && c + 1 < components {
                    c += 1;
                    acc += weights[c];
                }
                labels.push(c);
                data.extend(means[c].iter().map(|&p| (rng.gen::<f64>() < p) as u8 as f64));
            }
            let dataset = Dataset::new(Tensor::matrix(n, pixels, data)?, Some(labels), Split::Train, side, side)?;
            Ok(SyntheticData {
                dataset,
                mixture: Some(MixtureParams { weights, means }),
            })
        }
    }
}
