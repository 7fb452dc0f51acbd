use super::{class_labels, features, leaf, param, softmax_xent, Model};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::ParamTree;

/// Multinomial logistic regression: logits `xW + b` with `W: [d, K]`,
/// `b: [K]`, softmax cross-entropy loss. Initialised to zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogisticClassifier {
    num_features: usize,
    num_classes: usize,
}

impl LogisticClassifier {
    pub fn new(num_features: usize, num_classes: usize) -> Result<Self> {
        if num_features == 0 || num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "logistic classifier needs >= 1 feature and >= 2 classes, got {num_features} and {num_classes}"
            )));
        }
        Ok(Self {
            num_features,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

impl<T: Scalar> Model<T> for LogisticClassifier {
    fn init(&self, _rng: Rng) -> ParamTree<T> {
        let (d, k) = (self.num_features, self.num_classes);
        ParamTree::branch([
            ("w", leaf(vec![d, k], vec![T::zero(); d * k])),
            ("b", leaf(vec![k], vec![T::zero(); k])),
        ])
        .expect("static keys")
    }

    fn apply(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
        let (d, k) = (self.num_features, self.num_classes);
        let x = features(batch, d)?;
        let w = param(params, "w", &[d, k])?;
        let b = param(params, "b", &[k])?;
        let mut out = Vec::with_capacity(batch.capacity() * k);
        for i in 0..batch.capacity() {
            let xi = x.row(i);
            out.extend((0..k).map(|c| (0..d).fold(b[c], |a, j| a + xi[j] * w[j * k + c])));
        }
        Ok(Tensor::from_parts_unchecked(vec![batch.capacity(), k], out))
    }

    fn per_example_loss(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
        let labels = class_labels(batch, self.num_classes)?;
        let logits = self.apply(params, batch)?;
        let mut losses: Vec<T> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| softmax_xent(logits.row(i), y).0)
            .collect();
        losses.resize(batch.capacity(), T::zero());
        Ok(Tensor::from_parts_unchecked(vec![batch.capacity()], losses))
    }

    fn grad(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<ParamTree<T>> {
        let (d, k) = (self.num_features, self.num_classes);
        let labels = class_labels(batch, k)?;
        let logits = self.apply(params, batch)?;
        let x = features(batch, d)?;
        let mut gw = vec![T::zero(); d * k];
        let mut gb = vec![T::zero(); k];
        for (i, &y) in labels.iter().enumerate() {
            let (_, mut err) = softmax_xent(logits.row(i), y);
            err[y] = err[y] - T::one();
            let xi = x.row(i);
            for j in 0..d {
                for c in 0..k {
                    gw[j * k + c] = gw[j * k + c] + xi[j] * err[c];
                }
            }
            for c in 0..k {
                gb[c] = gb[c] + err[c];
            }
        }
        if !labels.is_empty() {
            let m = T::from_count(labels.len());
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g = *g / m);
        }
        ParamTree::branch([("w", leaf(vec![d, k], gw)), ("b", leaf(vec![k], gb))])
    }
}
