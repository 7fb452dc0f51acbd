//! The three batching strategies over a [`ClientDataset`].
//!
//! - [`batch`]: sequential, final batch left short.
//! - [`padded_batch`]: sequential, final batch zero-padded up to one of a
//!   small set of bucket capacities, so the number of distinct batch shapes
//!   across all clients is bounded by the number of buckets.
//! - [`shuffle_repeat_batch`]: shuffled without replacement, repeated over
//!   epochs, every batch exactly `batch_size` rows.

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use super::ClientDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A fixed-capacity slice of a client dataset. The first `num_real` rows are
/// real examples; the remaining rows are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T = f64> {
    columns: IndexMap<String, Tensor<T>>,
    mask: Vec<bool>,
    num_real: usize,
}

impl<T: Scalar> Batch<T> {
    pub(crate) fn from_parts(columns: IndexMap<String, Tensor<T>>, num_real: usize, capacity: usize) -> Self {
        let mask = (0..capacity).map(|i| i < num_real).collect();
        Self {
            columns,
            mask,
            num_real,
        }
    }

    /// A fully real batch assembled from columns with equal leading extent.
    pub fn from_columns<K: Into<String>>(columns: impl IntoIterator<Item = (K, Tensor<T>)>) -> Result<Self> {
        let ds = ClientDataset::new(columns)?;
        let n = ds.num_examples();
        Ok(Self::from_parts(ds.columns, n, n))
    }

    pub fn capacity(&self) -> usize {
        self.mask.len()
    }

    pub fn num_real(&self) -> usize {
        self.num_real
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn column(&self, name: &str) -> Option<&Tensor<T>> {
        self.columns.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.column(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Mutable access to a column, e.g. to overwrite padding rows.
    pub fn column_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.columns.get_mut(name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }
}

/// Splits `ds` into consecutive batches of `batch_size`; the last batch holds
/// the `n mod batch_size` leftover examples, unpadded.
pub fn batch<T: Scalar>(ds: &ClientDataset<T>, batch_size: usize) -> Result<Vec<Batch<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidBatchSpec("batch_size must be positive".into()));
    }
    let n = ds.num_examples();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((0..n)
        .step_by(batch_size)
        .map(|start| {
            let rows: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            ds.select(&rows, rows.len())
        })
        .collect())
}

/// Powers of two below `batch_size`, plus `batch_size` itself.
pub fn default_buckets(batch_size: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(1usize), |b| b.checked_mul(2))
        .take_while(|&b| b < batch_size)
        .collect();
    out.push(batch_size);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatchSpec {
    batch_size: usize,
    buckets: Vec<usize>,
}

impl PaddedBatchSpec {
    /// `buckets` must be strictly increasing, positive, and end at
    /// `batch_size`.
    pub fn new(batch_size: usize, buckets: Vec<usize>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidBatchSpec("batch_size must be positive".into()));
        }
        if buckets.is_empty() || buckets[0] == 0 || buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidBatchSpec(format!(
                "buckets must be positive and strictly increasing, got {buckets:?}"
            )));
        }
        if buckets.last() != Some(&batch_size) {
            return Err(Error::InvalidBatchSpec(format!(
                "largest bucket must equal batch_size {batch_size}, got {buckets:?}"
            )));
        }
        Ok(Self { batch_size, buckets })
    }

    pub fn with_default_buckets(batch_size: usize) -> Result<Self> {
        Self::new(batch_size, default_buckets(batch_size))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    /// Smallest bucket that holds `remainder` rows.
    pub fn bucket_for(&self, remainder: usize) -> Result<usize> {
        self.buckets
            .iter()
            .copied()
            .find(|&b| b >= remainder)
            .ok_or(Error::NoBucketFits {
                remainder,
                max_bucket: self.batch_size,
            })
    }
}

/// Sequential batches of `batch_size`; a short final batch is padded to the
/// smallest bucket that fits it and masked.
pub fn padded_batch<T: Scalar>(ds: &ClientDataset<T>, spec: &PaddedBatchSpec) -> Result<Vec<Batch<T>>> {
    let n = ds.num_examples();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let b = spec.batch_size;
    let mut out = Vec::with_capacity(n.div_ceil(b));
    for start in (0..n).step_by(b) {
        let rows: Vec<usize> = (start..(start + b).min(n)).collect();
        let capacity = if rows.len() == b {
            b
        } else {
            spec.bucket_for(rows.len())?
        };
        out.push(ds.select(&rows, capacity));
    }
    Ok(out)
}

/// When a shuffled stream stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Repeat {
    /// After the last full batch of this many passes over the data.
    Epochs(usize),
    /// After exactly this many batches.
    Steps(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleRepeatSpec {
    pub batch_size: usize,
    pub repeat: Repeat,
    /// Label folded into the caller's rng before drawing permutations.
    pub seed_label: String,
}

impl ShuffleRepeatSpec {
    pub fn epochs(batch_size: usize, num_epochs: usize) -> Self {
        Self {
            batch_size,
            repeat: Repeat::Epochs(num_epochs),
            seed_label: "shuffle".to_string(),
        }
    }

    pub fn steps(batch_size: usize, num_steps: usize) -> Self {
        Self {
            batch_size,
            repeat: Repeat::Steps(num_steps),
            seed_label: "shuffle".to_string(),
        }
    }
}

/// Lazily generated stream of shuffled, repeated batches.
///
/// Epoch `e` is a fresh permutation drawn from `rng/seed_label/e`. The
/// stream is the concatenation of all epoch permutations cut into chunks of
/// `batch_size`, so examples left over at an epoch boundary lead the next
/// batch, followed by the start of the next epoch.
#[derive(Debug)]
pub struct ShuffleRepeatBatches<'a, T = f64> {
    ds: &'a ClientDataset<T>,
    batch_size: usize,
    rng: Rng,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
    remaining: usize,
}

impl<T: Scalar> ShuffleRepeatBatches<'_, T> {
    fn start_epoch(&mut self) {
        let mut epoch_rng = self.rng.split(self.epoch);
        self.order = (0..self.ds.num_examples()).collect();
        self.order.shuffle(&mut epoch_rng);
        self.pos = 0;
        self.epoch += 1;
    }
}

impl<T: Scalar> Iterator for ShuffleRepeatBatches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.remaining == 0 {
            return None;
        }
        let mut rows = Vec::with_capacity(self.batch_size);
        while rows.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.start_epoch();
            }
            let take = (self.batch_size - rows.len()).min(self.order.len() - self.pos);
            rows.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        self.remaining -= 1;
        Some(self.ds.select(&rows, self.batch_size))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl<T: Scalar> ExactSizeIterator for ShuffleRepeatBatches<'_, T> {}

pub fn shuffle_repeat_batch<'a, T: Scalar>(
    ds: &'a ClientDataset<T>,
    spec: &ShuffleRepeatSpec,
    rng: Rng,
) -> Result<ShuffleRepeatBatches<'a, T>> {
    let b = spec.batch_size;
    if b == 0 {
        return Err(Error::InvalidBatchSpec("batch_size must be positive".into()));
    }
    let n = ds.num_examples();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let total = match spec.repeat {
        Repeat::Epochs(0) | Repeat::Steps(0) => {
            return Err(Error::InvalidBatchSpec("repeat count must be positive".into()))
        }
        Repeat::Epochs(e) => n * e / b,
        Repeat::Steps(s) => s,
    };
    Ok(ShuffleRepeatBatches {
        ds,
        batch_size: b,
        rng: rng.split(spec.seed_label.as_str()),
        epoch: 0,
        order: Vec::new(),
        pos: 0,
        remaining: total,
    })
}
