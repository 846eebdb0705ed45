//! Datasets: IDX ingestion, binarization, synthetic generators and batching.

mod batch;
mod idx;
mod synthetic;

pub use batch::{batch_iterator, epoch_order, Batch, BatchIter};
pub use idx::{find_idx_pair, load_idx, load_idx_dir, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{synthetic_dataset, MixtureParams, SyntheticData, SyntheticKind};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::gumbel::NoiseStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images as a `count x (height * width)` matrix with values in `[0, 1]`,
/// plus optional labels aligned one-to-one with rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<usize>>,
    split: Split,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Option<Vec<usize>>,
        split: Split,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if images.shape().len() != 2 {
            return Err(dim_err("dataset image matrix rank", 2, images.shape().len()));
        }
        if images.cols() != height * width {
            return Err(dim_err("pixels per image", height * width, images.cols()));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(dim_err("label count", images.rows(), l.len()));
            }
        }
        Ok(Self {
            images,
            labels,
            split,
            height,
            width,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, labels) = self.gather(indices)?;
        Dataset::new(x, labels, self.split, self.height, self.width)
    }

    /// The first `n` rows (all rows if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).expect("indices in range")
    }

    pub(crate) fn gather(&self, indices: &[usize]) -> Result<(Tensor, Option<Vec<usize>>)> {
        let cols = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("row {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.images.row(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok((Tensor::matrix(indices.len(), cols, data)?, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizeMode {
    Threshold,
    Stochastic,
}

/// Map pixels to `{0, 1}`: `pixel >= 0.5` under `Threshold`, one
/// `Bernoulli(pixel)` draw per pixel from stream `(seed, 0)` under
/// `Stochastic`.
pub fn binarize(d: &Dataset, mode: BinarizeMode, seed: u64) -> Dataset {
    let data: Vec<f64> = match mode {
        BinarizeMode::Threshold => d.images.data().iter().map(|&v| (v >= 0.5) as u8 as f64).collect(),
        BinarizeMode::Stochastic => {
            let mut rng = NoiseStream::new(seed, 0);
            // Exact 0 and 1 stay fixed because `uniform` lies in [0, 1).
            d.images.data().iter().map(|&v| (rng.gen::<f64>() < v) as u8 as f64).collect()
        }
    };
    let images = Tensor::new(d.images.shape().to_vec(), data).expect("shape preserved");
    Dataset {
        images,
        ..d.clone()
    }
}
