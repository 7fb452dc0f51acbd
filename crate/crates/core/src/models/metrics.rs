//! Metrics are defined on a single example. Batch, client and population
//! values are weighted averages of example values, accumulated over the real
//! rows of padded batches only.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use super::{class_index, softmax_xent, Model};
use crate::data::{padded_batch, Batch, ClientId, FederatedData, PaddedBatchSpec, TARGETS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tree::ParamTree;

pub trait Metric<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// `(value, weight)` of one example given the model's output row.
    fn evaluate_example(&self, prediction: &[T], target: T) -> Result<(f64, f64)>;
}

/// Fraction of examples whose arg-max logit is the target class.
#[derive(Clone, Copy, Debug, Default)]
pub struct Accuracy;

impl<T: Scalar> Metric<T> for Accuracy {
    fn name(&self) -> &str {
        "accuracy"
    }

    fn evaluate_example(&self, prediction: &[T], target: T) -> Result<(f64, f64)> {
        let label = class_index(target, prediction.len())?;
        // first maximum wins ties
        let argmax = prediction
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > prediction[best] { i } else { best });
        Ok((if argmax == label { 1.0 } else { 0.0 }, 1.0))
    }
}

/// Squared error of a scalar prediction.
#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredError;

impl<T: Scalar> Metric<T> for SquaredError {
    fn name(&self) -> &str {
        "mse"
    }

    fn evaluate_example(&self, prediction: &[T], target: T) -> Result<(f64, f64)> {
        let [p] = prediction else {
            return Err(Error::InvalidInput(format!(
                "squared error needs one output per example, got {}",
                prediction.len()
            )));
        };
        let r = (*p - target).as_f64();
        Ok((r * r, 1.0))
    }
}

/// Softmax cross-entropy of logits.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossEntropy;

impl<T: Scalar> Metric<T> for CrossEntropy {
    fn name(&self) -> &str {
        "cross_entropy"
    }

    fn evaluate_example(&self, prediction: &[T], target: T) -> Result<(f64, f64)> {
        let label = class_index(target, prediction.len())?;
        Ok((softmax_xent(prediction, label).0.as_f64(), 1.0))
    }
}

/// Running `Σ value·weight` and `Σ weight` per metric.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    sums: Vec<(f64, f64)>,
    examples: usize,
}

impl MetricAccumulator {
    pub fn new(num_metrics: usize) -> Self {
        Self {
            sums: vec![(0.0, 0.0); num_metrics],
            examples: 0,
        }
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    /// Weighted mean of metric `i`, or NaN when it has no weight.
    pub fn value(&self, i: usize) -> f64 {
        let (s, w) = self.sums[i];
        if w > 0.0 {
            s / w
        } else {
            f64::NAN
        }
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.sums[i].1
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.examples += other.examples;
    }
}

/// Adds the real rows of `batch` to `acc`.
pub fn accumulate_batch<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    params: &ParamTree<T>,
    batch: &Batch<T>,
    metrics: &[&dyn Metric<T>],
    acc: &mut MetricAccumulator,
) -> Result<()> {
    let out = model.apply(params, batch)?;
    let y = batch.require(TARGETS)?.data();
    for i in 0..batch.num_real() {
        for (m, slot) in metrics.iter().zip(acc.sums.iter_mut()) {
            let (v, w) = m.evaluate_example(out.row(i), y[i])?;
            slot.0 += v * w;
            slot.1 += w;
        }
    }
    acc.examples += batch.num_real();
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_client: BTreeMap<ClientId, IndexMap<String, f64>>,
    pub overall: IndexMap<String, f64>,
    pub example_counts: BTreeMap<ClientId, usize>,
}

impl MetricReport {
    pub fn metric_names(&self) -> impl Iterator<Item = &str> {
        self.overall.keys().map(String::as_str)
    }
}

/// Evaluates `metrics` on every client through padded batches.
///
/// Per-client values are weighted means over that client's examples; the
/// overall value pools all examples, which for unit-weight metrics equals
/// the example-count-weighted average of the per-client values.
pub fn evaluate<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    params: &ParamTree<T>,
    fd: &FederatedData<T>,
    metrics: &[&dyn Metric<T>],
    spec: &PaddedBatchSpec,
) -> Result<MetricReport> {
    let names: Vec<String> = metrics.iter().map(|m| m.name().to_string()).collect();
    let mut total = MetricAccumulator::new(metrics.len());
    let mut per_client = BTreeMap::new();
    let mut example_counts = BTreeMap::new();
    for (id, ds) in fd.iter() {
        let mut acc = MetricAccumulator::new(metrics.len());
        for b in padded_batch(ds, spec)? {
            accumulate_batch(model, params, &b, metrics, &mut acc)?;
        }
        let values = names.iter().enumerate().map(|(i, n)| (n.clone(), acc.value(i))).collect();
        per_client.insert(id.clone(), values);
        example_counts.insert(id.clone(), acc.examples());
        total.merge(&acc);
    }
    let overall = names.iter().enumerate().map(|(i, n)| (n.clone(), total.value(i))).collect();
    Ok(MetricReport {
        per_client,
        overall,
        example_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClientDataset;
    use crate::models::LogisticClassifier;
    use crate::tensor::Tensor;

    /// One-feature, two-class data where a positive feature predicts class 1
    /// under the fixed parameters below.
    fn client(xs: &[f64], ys: &[f64]) -> ClientDataset<f64> {
        ClientDataset::new([
            ("x", Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap()),
            ("y", Tensor::vector(ys.to_vec()).unwrap()),
        ])
        .unwrap()
    }

    fn setup() -> (LogisticClassifier, ParamTree<f64>) {
        let m = LogisticClassifier::new(1, 2).unwrap();
        let p = ParamTree::branch([
            ("w", ParamTree::leaf(Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap())),
            ("b", ParamTree::leaf(Tensor::vector(vec![0.0, 0.0]).unwrap())),
        ])
        .unwrap();
        (m, p)
    }

    #[test]
    fn single_client_accuracy() {
        let (m, p) = setup();
        let fd = FederatedData::from_clients([(ClientId::new("a"), client(&[1.0, -1.0, 2.0], &[1.0, 0.0, 0.0]))])
            .unwrap();
        let spec = PaddedBatchSpec::with_default_buckets(2).unwrap();
        let r = evaluate(&m, &p, &fd, &[&Accuracy], &spec).unwrap();
        assert!((r.per_client[&ClientId::new("a")]["accuracy"] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.overall["accuracy"] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.example_counts[&ClientId::new("a")], 3);
    }

    #[test]
    fn overall_is_example_weighted() {
        let (m, p) = setup();
        let fd = FederatedData::from_clients([
            (ClientId::new("a"), client(&[1.0], &[1.0])),
            (ClientId::new("b"), client(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0])),
        ])
        .unwrap();
        let spec = PaddedBatchSpec::with_default_buckets(4).unwrap();
        let r = evaluate(&m, &p, &fd, &[&Accuracy, &CrossEntropy], &spec).unwrap();
        assert_eq!(r.per_client[&ClientId::new("a")]["accuracy"], 1.0);
        assert_eq!(r.per_client[&ClientId::new("b")]["accuracy"], 0.0);
        assert_eq!(r.overall["accuracy"], 0.25);
        assert_eq!(r.metric_names().collect::<Vec<_>>(), ["accuracy", "cross_entropy"]);
    }

    #[test]
    fn saturated_accuracy() {
        let (m, p) = setup();
        let fd = FederatedData::from_clients([
            (ClientId::new("a"), client(&[1.0, -3.0], &[1.0, 0.0])),
            (ClientId::new("b"), client(&[0.5, 0.25, -0.1], &[1.0, 1.0, 0.0])),
        ])
        .unwrap();
        let spec = PaddedBatchSpec::with_default_buckets(2).unwrap();
        let r = evaluate(&m, &p, &fd, &[&Accuracy], &spec).unwrap();
        assert!(r.per_client.values().all(|v| v["accuracy"] == 1.0));
        assert_eq!(r.overall["accuracy"], 1.0);
    }

    #[test]
    fn squared_error_shape_check() {
        assert!(Metric::<f64>::evaluate_example(&SquaredError, &[1.0, 2.0], 0.0).is_err());
        assert_eq!(Metric::<f64>::evaluate_example(&SquaredError, &[1.5], 0.5).unwrap(), (1.0, 1.0));
    }
}
