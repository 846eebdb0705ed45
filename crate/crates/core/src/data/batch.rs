use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::gumbel::NoiseStream;
use crate::tensor::Tensor;

/// A seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut NoiseStream::new(seed, 0));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Consecutive slices of a seeded permutation; the last may be short.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    at: usize,
}

impl BatchIter<'_> {
    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.at >= self.order.len() {
            return None;
        }
        let end = (self.at + self.batch_size).min(self.order.len());
        let indices = self.order[self.at..end].to_vec();
        self.at = end;
        let (x, labels) = self.data.gather(&indices).expect("permutation indices in range");
        Some(Batch { indices, x, labels })
    }
}

pub fn batch_iterator(d: &Dataset, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    Ok(BatchIter {
        data: d,
        order: epoch_order(d.len(), seed),
        batch_size,
        at: 0,
    })
}
