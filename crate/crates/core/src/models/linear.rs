use super::{features, leaf, param, targets, Model};
use crate::data::Batch;
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::ParamTree;

/// Least squares regression: prediction `⟨w, x⟩ + b`, per-example loss
/// `(prediction - y)²`. Parameters are `{w: [d]}` plus `{b: []}` when the
/// bias is enabled. Initialised to zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearRegression {
    num_features: usize,
    bias: bool,
}

impl LinearRegression {
    pub fn new(num_features: usize) -> Self {
        assert!(num_features >= 1, "linear regression needs at least one feature");
        Self {
            num_features,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    fn bias<T: Scalar>(&self, params: &ParamTree<T>) -> Result<T> {
        if self.bias {
            Ok(param(params, "b", &[])?[0])
        } else {
            Ok(T::zero())
        }
    }

    fn residuals<T: Scalar>(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Vec<T>> {
        let pred = self.apply(params, batch)?;
        let y = targets(batch)?;
        Ok((0..batch.num_real()).map(|i| pred.data()[i] - y[i]).collect())
    }
}

impl<T: Scalar> Model<T> for LinearRegression {
    fn init(&self, _rng: Rng) -> ParamTree<T> {
        let mut kids = vec![("w", leaf(vec![self.num_features], vec![T::zero(); self.num_features]))];
        if self.bias {
            kids.push(("b", leaf(vec![], vec![T::zero()])));
        }
        ParamTree::branch(kids).expect("static keys")
    }

    fn apply(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
        let d = self.num_features;
        let x = features(batch, d)?;
        let w = param(params, "w", &[d])?;
        let b = self.bias(params)?;
        let out = (0..batch.capacity())
            .map(|i| x.row(i).iter().zip(w).fold(T::zero(), |a, (&xi, &wi)| a + xi * wi) + b)
            .collect();
        Ok(Tensor::from_parts_unchecked(vec![batch.capacity()], out))
    }

    fn per_example_loss(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut losses: Vec<T> = self.residuals(params, batch)?.into_iter().map(|r| r * r).collect();
        losses.resize(batch.capacity(), T::zero());
        Ok(Tensor::from_parts_unchecked(vec![batch.capacity()], losses))
    }

    fn grad(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<ParamTree<T>> {
        let d = self.num_features;
        let x = features(batch, d)?;
        let r = self.residuals(params, batch)?;
        let two = T::lit(2.0);
        let mut gw = vec![T::zero(); d];
        let mut gb = T::zero();
        for (i, &ri) in r.iter().enumerate() {
            for (g, &xi) in gw.iter_mut().zip(x.row(i)) {
                *g = *g + two * ri * xi;
            }
            gb = gb + two * ri;
        }
        if !r.is_empty() {
            let m = T::from_count(r.len());
            gw.iter_mut().for_each(|g| *g = *g / m);
            gb = gb / m;
        }
        let mut kids = vec![("w", leaf(vec![d], gw))];
        if self.bias {
            kids.push(("b", leaf(vec![], vec![gb])));
        }
        ParamTree::branch(kids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{padded_batch, ClientDataset, PaddedBatchSpec};

    fn scalar_params(w: f64) -> ParamTree<f64> {
        ParamTree::branch([("w", leaf(vec![1], vec![w]))]).unwrap()
    }

    fn batch_xy(x: &[f64], y: &[f64]) -> Batch<f64> {
        Batch::from_columns([
            ("x", Tensor::new(vec![x.len(), 1], x.to_vec()).unwrap()),
            ("y", Tensor::vector(y.to_vec()).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn hand_computed_loss_and_grad() {
        let m = LinearRegression::new(1).without_bias();
        let b = batch_xy(&[1.0, 2.0], &[1.0, 2.0]);
        let p = scalar_params(0.5);
        assert_eq!(m.loss(&p, &b).unwrap(), 0.625);
        assert_eq!(m.grad(&p, &b).unwrap().tensor("w").unwrap().data(), &[-2.5]);
    }

    #[test]
    fn exact_solution_has_zero_loss_and_grad() {
        let m = LinearRegression::new(1).without_bias();
        let b = batch_xy(&[1.0, 2.0, -3.0], &[2.0, 4.0, -6.0]);
        let p = scalar_params(2.0);
        assert_eq!(m.loss(&p, &b).unwrap(), 0.0);
        assert_eq!(m.grad(&p, &b).unwrap().tensor("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn padded_row_is_ignored() {
        let m = LinearRegression::new(1);
        let ds = ClientDataset::new([
            ("x", Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap()),
            ("y", Tensor::vector(vec![1.0, 2.0, 5.0]).unwrap()),
        ])
        .unwrap();
        let padded = padded_batch(&ds, &PaddedBatchSpec::new(4, vec![4]).unwrap()).unwrap();
        assert_eq!(padded[0].num_real(), 3);
        let plain = batch_xy(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]);
        let p = ParamTree::branch([("w", leaf(vec![1], vec![0.7])), ("b", leaf(vec![], vec![-0.2]))]).unwrap();
        assert_eq!(m.loss(&p, &padded[0]).unwrap(), m.loss(&p, &plain).unwrap());
        assert_eq!(m.grad(&p, &padded[0]).unwrap(), m.grad(&p, &plain).unwrap());
        assert_eq!(m.per_example_loss(&p, &padded[0]).unwrap().data()[3], 0.0);
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let m = LinearRegression::new(2);
        let b = batch_xy(&[1.0], &[1.0]);
        let p: ParamTree<f64> = m.init(Rng::new(0));
        assert!(m.loss(&p, &b).is_err());
    }
}
