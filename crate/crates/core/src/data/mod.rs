//! Federated datasets: a map from client id to that client's columnar
//! examples, plus cohort sampling and size statistics.

mod batching;

pub use batching::{
    batch, default_buckets, padded_batch, shuffle_repeat_batch, Batch, PaddedBatchSpec, Repeat,
    ShuffleRepeatBatches, ShuffleRepeatSpec,
};

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{Label, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Feature column read by the built-in models.
pub const FEATURES: &str = "x";
/// Target column: a real value for regression, a class index for classifiers.
pub const TARGETS: &str = "y";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(String);

impl ClientId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClientId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<String> for ClientId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl<'a> From<&'a ClientId> for Label<'a> {
    fn from(id: &'a ClientId) -> Self {
        Label::Str(&id.0)
    }
}

/// The local examples of one client, stored column by column. Every column's
/// leading extent is the number of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset<T = f64> {
    columns: IndexMap<String, Tensor<T>>,
    num_examples: usize,
}

impl<T: Scalar> ClientDataset<T> {
    pub fn new<K: Into<String>>(columns: impl IntoIterator<Item = (K, Tensor<T>)>) -> Result<Self> {
        let mut map = IndexMap::new();
        let mut num_examples = None;
        for (name, t) in columns {
            let name = name.into();
            let Some(n) = t.leading_extent() else {
                return Err(Error::InvalidDataset(format!("column `{name}` has rank 0")));
            };
            match num_examples {
                None => num_examples = Some(n),
                Some(m) if m != n => {
                    return Err(Error::InvalidDataset(format!(
                        "column `{name}` has {n} rows, expected {m}"
                    )))
                }
                _ => {}
            }
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::DuplicateKey(name));
            }
        }
        let num_examples =
            num_examples.ok_or_else(|| Error::InvalidDataset("no columns".to_string()))?;
        Ok(Self {
            columns: map,
            num_examples,
        })
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    pub fn column(&self, name: &str) -> Option<&Tensor<T>> {
        self.columns.get(name)
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.columns.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Batch made of `rows` (in that order), zero-padded to `capacity`.
    pub(crate) fn select(&self, rows: &[usize], capacity: usize) -> Batch<T> {
        let columns = self
            .columns
            .iter()
            .map(|(k, t)| (k.clone(), t.gather_rows(rows, capacity)))
            .collect();
        Batch::from_parts(columns, rows.len(), capacity)
    }
}

/// Clients keyed by id; iteration is lexicographic by id.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedData<T = f64> {
    clients: BTreeMap<ClientId, ClientDataset<T>>,
}

impl<T: Scalar> Default for FederatedData<T> {
    fn default() -> Self {
        Self {
            clients: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> FederatedData<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_clients(clients: impl IntoIterator<Item = (ClientId, ClientDataset<T>)>) -> Result<Self> {
        let mut fd = Self::new();
        for (id, ds) in clients {
            fd.insert(id, ds)?;
        }
        Ok(fd)
    }

    pub fn insert(&mut self, id: ClientId, ds: ClientDataset<T>) -> Result<()> {
        if self.clients.contains_key(&id) {
            return Err(Error::DuplicateKey(id.0));
        }
        self.clients.insert(id, ds);
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn client(&self, id: &ClientId) -> Option<&ClientDataset<T>> {
        self.clients.get(id)
    }

    /// `n_k`, the number of examples held by client `id`.
    pub fn client_size(&self, id: &ClientId) -> Option<usize> {
        self.clients.get(id).map(ClientDataset::num_examples)
    }

    pub fn client_ids(&self) -> impl Iterator<Item = &ClientId> {
        self.clients.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClientId, &ClientDataset<T>)> {
        self.clients.iter()
    }

    pub fn total_examples(&self) -> usize {
        self.clients.values().map(ClientDataset::num_examples).sum()
    }
}

/// Histogram of client sizes: number of examples → number of clients.
pub fn client_stats<T: Scalar>(fd: &FederatedData<T>) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for ds in fd.clients.values() {
        *hist.entry(ds.num_examples()).or_insert(0) += 1;
    }
    hist
}

/// Uniformly samples `c` distinct clients without replacement. The result
/// is sorted by id.
pub fn sample_clients<T: Scalar>(fd: &FederatedData<T>, c: usize, mut rng: Rng) -> Result<Vec<ClientId>> {
    let n = fd.num_clients();
    if c == 0 || c > n {
        return Err(Error::CohortTooLarge {
            requested: c,
            available: n,
        });
    }
    let ids: Vec<&ClientId> = fd.client_ids().collect();
    let mut picked: Vec<usize> = index::sample(&mut rng, n, c).into_vec();
    // ids are already sorted, so sorting positions sorts the cohort
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| ids[i].clone()).collect())
}
