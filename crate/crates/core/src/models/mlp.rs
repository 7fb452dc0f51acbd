use rand_distr::{Distribution, StandardNormal};

use super::{class_labels, features, leaf, param, softmax_xent, Model};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::ParamTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Tanh => T::one() - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidInput(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully connected network with a softmax cross-entropy head.
///
/// `layer_sizes = [d, h_1, ..., h_n, K]`; hidden layers use `activation`,
/// the last layer emits logits. Parameters are
/// `{layer_0: {w: [d, h_1], b: [h_1]}, layer_1: {...}, ...}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

struct Trace<T> {
    /// Input of every layer: `inputs[0]` is x, `inputs[l]` the activation of
    /// hidden layer `l - 1`.
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    logits: Vec<T>,
}

impl Mlp {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 3 || layer_sizes.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "mlp needs input, >= 1 hidden and output layer sizes, all positive; got {layer_sizes:?}"
            )));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(Error::InvalidInput("mlp needs at least 2 output classes".into()));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn weights<'a, T: Scalar>(&self, params: &'a ParamTree<T>) -> Result<Vec<(&'a [T], &'a [T])>> {
        (0..self.num_layers())
            .map(|l| {
                let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
                Ok((
                    param(params, &format!("layer_{l}/w"), &[i, o])?,
                    param(params, &format!("layer_{l}/b"), &[o])?,
                ))
            })
            .collect()
    }

    fn forward<T: Scalar>(&self, weights: &[(&[T], &[T])], x: &[T]) -> Trace<T> {
        let last = self.num_layers() - 1;
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(last);
        for (l, (w, b)) in weights.iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let a = &inputs[l];
            let z: Vec<T> = (0..n_out)
                .map(|o| (0..n_in).fold(b[o], |acc, i| acc + a[i] * w[i * n_out + o]))
                .collect();
            if l == last {
                return Trace {
                    inputs,
                    pre,
                    logits: z,
                };
            }
            inputs.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            pre.push(z);
        }
        unreachable!("at least one layer")
    }
}

impl<T: Scalar> Model<T> for Mlp {
    fn init(&self, rng: Rng) -> ParamTree<T> {
        let layers = (0..self.num_layers()).map(|l| {
            let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut r = rng.split(l);
            let scale = 1.0 / (i as f64).sqrt();
            let w = (0..i * o)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    T::lit(z * scale)
                })
                .collect();
            let node = ParamTree::branch([("w", leaf(vec![i, o], w)), ("b", leaf(vec![o], vec![T::zero(); o]))])
                .expect("static keys");
            (format!("layer_{l}"), node)
        });
        ParamTree::branch(layers).expect("distinct layer names")
    }

    fn apply(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
        let x = features(batch, self.layer_sizes[0])?;
        let weights = self.weights(params)?;
        let k = self.num_classes();
        let mut out = Vec::with_capacity(batch.capacity() * k);
        for i in 0..batch.capacity() {
            out.extend(self.forward(&weights, x.row(i)).logits);
        }
        Ok(Tensor::from_parts_unchecked(vec![batch.capacity(), k], out))
    }

    fn per_example_loss(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
        let labels = class_labels(batch, self.num_classes())?;
        let x = features(batch, self.layer_sizes[0])?;
        let weights = self.weights(params)?;
        let mut losses: Vec<T> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| softmax_xent(&self.forward(&weights, x.row(i)).logits, y).0)
            .collect();
        losses.resize(batch.capacity(), T::zero());
        Ok(Tensor::from_parts_unchecked(vec![batch.capacity()], losses))
    }

    fn grad(&self, params: &ParamTree<T>, batch: &Batch<T>) -> Result<ParamTree<T>> {
        let labels = class_labels(batch, self.num_classes())?;
        let x = features(batch, self.layer_sizes[0])?;
        let weights = self.weights(params)?;
        let sizes = &self.layer_sizes;
        let mut gw: Vec<Vec<T>> = (0..self.num_layers())
            .map(|l| vec![T::zero(); sizes[l] * sizes[l + 1]])
            .collect();
        let mut gb: Vec<Vec<T>> = (0..self.num_layers()).map(|l| vec![T::zero(); sizes[l + 1]]).collect();

        for (i, &y) in labels.iter().enumerate() {
            let trace = self.forward(&weights, x.row(i));
            let (_, mut delta) = softmax_xent(&trace.logits, y);
            delta[y] = delta[y] - T::one();
            for l in (0..self.num_layers()).rev() {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let a = &trace.inputs[l];
                for p in 0..n_in {
                    for o in 0..n_out {
                        gw[l][p * n_out + o] = gw[l][p * n_out + o] + a[p] * delta[o];
                    }
                }
                for o in 0..n_out {
                    gb[l][o] = gb[l][o] + delta[o];
                }
                if l > 0 {
                    let w = weights[l].0;
                    delta = (0..n_in)
                        .map(|p| {
                            let back = (0..n_out).fold(T::zero(), |acc, o| acc + w[p * n_out + o] * delta[o]);
                            back * self.activation.derivative(trace.pre[l - 1][p], a[p])
                        })
                        .collect();
                }
            }
        }
        if !labels.is_empty() {
            let m = T::from_count(labels.len());
            for g in gw.iter_mut().chain(gb.iter_mut()) {
                g.iter_mut().for_each(|v| *v = *v / m);
            }
        }
        let layers = gw.into_iter().zip(gb).enumerate().map(|(l, (w, b))| {
            let node = ParamTree::branch([
                ("w", leaf(vec![sizes[l], sizes[l + 1]], w)),
                ("b", leaf(vec![sizes[l + 1]], b)),
            ])
            .expect("static keys");
            (format!("layer_{l}"), node)
        });
        ParamTree::branch(layers)
    }
}
