//! Models over [`ParamTree`] parameters with analytic gradients.
//!
//! Every model reads features from the [`FEATURES`](crate::data::FEATURES)
//! column (shape `[capacity, num_features]`) and targets from
//! [`TARGETS`](crate::data::TARGETS) (shape `[capacity]`). Losses and
//! gradients are means over the real (unmasked) rows of a batch; padding rows
//! are skipped entirely, so their contents can never leak into a result.

mod linear;
mod logistic;
mod metrics;
mod mlp;

pub use linear::LinearRegression;
pub use logistic::LogisticClassifier;
pub use metrics::{
    accumulate_batch, evaluate, Accuracy, CrossEntropy, Metric, MetricAccumulator, MetricReport,
    SquaredError,
};
pub use mlp::{Activation, Mlp};

use crate::data::{Batch, FEATURES, TARGETS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::ParamTree;

pub trait Model<T: Scalar>: Send + Sync {
    fn init(&self, rng: Rng) -> ParamTree<T>;

    /// Per-row outputs: `[capacity]` for regression, `[capacity, classes]`
    /// logits for classifiers. Padding rows produce values but carry no
    /// meaning.
    fn apply(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>>;

    /// Loss of every row; padding rows are zero.
    fn per_example_loss(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>>;

    /// Gradient of the masked mean loss. A batch without real rows has a
    /// zero gradient.
    fn grad(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<ParamTree<T>>;

    /// Masked mean of [`Model::per_example_loss`].
    fn loss(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<T> {
        let losses = self.per_example_loss(params, batch)?;
        Ok(masked_mean(losses.data(), batch.num_real()))
    }

    fn loss_and_grad(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<(T, ParamTree<T>)> {
        Ok((self.loss(params, batch)?, self.grad(params, batch)?))
    }
}

fn masked_mean<T: Scalar>(values: &[T], num_real: usize) -> T {
    if num_real == 0 {
        return T::zero();
    }
    let sum = values[..num_real].iter().fold(T::zero(), |a, &v| a + v);
    sum / T::from_count(num_real)
}

/// Feature matrix of the batch, checked to be `[capacity, width]`.
fn features<T: Scalar>(batch: &Batch<T>, width: usize) -> Result<&Tensor<T>> {
    let x = batch.require(FEATURES)?;
    if x.shape() != [batch.capacity(), width] {
        return Err(Error::InvalidInput(format!(
            "feature column has shape {:?}, expected [{}, {width}]",
            x.shape(),
            batch.capacity()
        )));
    }
    Ok(x)
}

fn targets<T: Scalar>(batch: &Batch<T>) -> Result<&[T]> {
    let y = batch.require(TARGETS)?;
    if y.shape() != [batch.capacity()] {
        return Err(Error::InvalidInput(format!(
            "target column has shape {:?}, expected [{}]",
            y.shape(),
            batch.capacity()
        )));
    }
    Ok(y.data())
}

/// Class indices of the real rows.
fn class_labels<T: Scalar>(batch: &Batch<T>, num_classes: usize) -> Result<Vec<usize>> {
    targets(batch)?[..batch.num_real()]
        .iter()
        .map(|&y| class_index(y, num_classes))
        .collect()
}

pub(crate) fn class_index<T: Scalar>(y: T, num_classes: usize) -> Result<usize> {
    let c = y.round();
    match c.to_usize() {
        Some(i) if c == y && i < num_classes => Ok(i),
        _ => Err(Error::InvalidInput(format!(
            "label {y} is not a class index below {num_classes}"
        ))),
    }
}

/// Softmax cross-entropy of one row of logits, and the softmax
/// probabilities. Computed as `(max - z_label) + ln(1 + Σ_{j≠argmax} e^{z_j - max})`
/// so the loss is never negative.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, z)| if z > best.1 { (i, z) } else { best });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let tail = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .fold(T::zero(), |a, (_, &e)| a + e);
    let loss = (max - logits[label]) + tail.ln_1p();
    let total = T::one() + tail;
    (loss, exps.into_iter().map(|e| e / total).collect())
}

pub(crate) fn leaf<T: Scalar>(shape: Vec<usize>, data: Vec<T>) -> ParamTree<T> {
    ParamTree::Leaf(Tensor::from_parts_unchecked(shape, data))
}

/// Looks up a parameter leaf, checking its shape.
fn param<'a, T: Scalar>(params: &'a ParamTree<T>, path: &str, shape: &[usize]) -> Result<&'a [T]> {
    let t = params
        .tensor(path)
        .ok_or_else(|| Error::InvalidInput(format!("missing parameter `{path}`")))?;
    if t.shape() != shape {
        return Err(Error::InvalidInput(format!(
            "parameter `{path}` has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xent_uniform_logits_is_ln_k() {
        for k in 2..6 {
            let (loss, p) = softmax_xent(&vec![0.3_f64; k], 1);
            assert!((loss - (k as f64).ln()).abs() < 1e-15);
            assert!(p.iter().all(|&q| (q - 1.0 / k as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn xent_confident_correct_is_tiny() {
        let (loss, _) = softmax_xent(&[0.0_f64, 50.0, 0.0, 0.0], 1);
        assert!((0.0..1e-20).contains(&loss));
    }

    #[test]
    fn class_index_validation() {
        assert_eq!(class_index(2.0_f64, 3).unwrap(), 2);
        assert!(class_index(3.0_f64, 3).is_err());
        assert!(class_index(1.5_f64, 3).is_err());
        assert!(class_index(-1.0_f64, 3).is_err());
    }
}
