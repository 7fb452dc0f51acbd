//! First-order optimizers over parameter trees.
//!
//! The same optimizer value serves as client optimizer and as server
//! optimizer; the learning rate is a [`Optimizer::step`] argument. On the
//! server the aggregated client delta plays the role of the gradient.
//!
//! Update rules, per element, at step `t` (1-based):
//!
//! | optimizer | state update | parameter update |
//! |-----------|--------------|------------------|
//! | sgd       | none         | `p -= lr·g` |
//! | adagrad   | `v += g²`    | `p -= lr·g / (√v + ε)` |
//! | adam      | `m = β₁m + (1-β₁)g`, `v = β₂v + (1-β₂)g²` | `p -= lr·m̂ / (√v̂ + ε)`, `m̂ = m/(1-β₁ᵗ)`, `v̂ = v/(1-β₂ᵗ)` |
//! | yogi      | `m = β₁m + (1-β₁)g`, `v = v - (1-β₂)·sign(v - g²)·g²` | `p -= lr·m / (√v + ε)` |
//!
//! Accumulators start at zero.

use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tree::ParamTree;

#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T = f64> {
    /// Number of steps taken.
    pub step: u64,
    /// Accumulators congruent to the parameters: none for sgd, `[v]` for
    /// adagrad, `[m, v]` for adam and yogi.
    pub slots: Vec<ParamTree<T>>,
}

pub trait Optimizer<T: Scalar>: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn init(&self, params: &ParamTree<T>) -> OptState<T>;

    fn step(
        &self,
        grads: &ParamTree<T>,
        state: &OptState<T>,
        params: &ParamTree<T>,
        lr: T,
    ) -> Result<(ParamTree<T>, OptState<T>)>;
}

fn check_inputs<T: Scalar>(grads: &ParamTree<T>, state: &OptState<T>, params: &ParamTree<T>, slots: usize) -> Result<()> {
    grads.check_congruent(params)?;
    if state.slots.len() != slots {
        return Err(Error::InvalidHyperparameter(format!(
            "optimizer state has {} slots, expected {slots}",
            state.slots.len()
        )));
    }
    for s in &state.slots {
        s.check_congruent(params)?;
    }
    Ok(())
}

fn check_beta(name: &str, beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter(format!("{name} must lie in [0, 1), got {beta}")))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter(format!("epsilon must be positive, got {eps}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sgd;

impl<T: Scalar> Optimizer<T> for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn init(&self, _params: &ParamTree<T>) -> OptState<T> {
        OptState {
            step: 0,
            slots: Vec::new(),
        }
    }

    fn step(
        &self,
        grads: &ParamTree<T>,
        state: &OptState<T>,
        params: &ParamTree<T>,
        lr: T,
    ) -> Result<(ParamTree<T>, OptState<T>)> {
        check_inputs(grads, state, params, 0)?;
        let new = params.zip_map(grads, move |p, g| p - lr * g)?;
        Ok((
            new,
            OptState {
                step: state.step + 1,
                slots: Vec::new(),
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adagrad {
    eps: f64,
}

impl Adagrad {
    pub fn new(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(Self { eps })
    }
}

impl Default for Adagrad {
    fn default() -> Self {
        Self { eps: 1e-3 }
    }
}

impl<T: Scalar> Optimizer<T> for Adagrad {
    fn name(&self) -> &'static str {
        "adagrad"
    }

    fn init(&self, params: &ParamTree<T>) -> OptState<T> {
        OptState {
            step: 0,
            slots: vec![params.zeros_like()],
        }
    }

    fn step(
        &self,
        grads: &ParamTree<T>,
        state: &OptState<T>,
        params: &ParamTree<T>,
        lr: T,
    ) -> Result<(ParamTree<T>, OptState<T>)> {
        check_inputs(grads, state, params, 1)?;
        let eps = T::lit(self.eps);
        let g = grads.flatten();
        let mut v = state.slots[0].flatten();
        let mut p = params.flatten();
        for i in 0..p.len() {
            v[i] = v[i] + g[i] * g[i];
            p[i] = p[i] - lr * g[i] / (v[i].sqrt() + eps);
        }
        Ok((
            params.unflatten_like(&p)?,
            OptState {
                step: state.step + 1,
                slots: vec![params.unflatten_like(&v)?],
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_beta("beta1", beta1)?;
        check_beta("beta2", beta2)?;
        check_eps(eps)?;
        Ok(Self { beta1, beta2, eps })
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn init(&self, params: &ParamTree<T>) -> OptState<T> {
        OptState {
            step: 0,
            slots: vec![params.zeros_like(), params.zeros_like()],
        }
    }

    fn step(
        &self,
        grads: &ParamTree<T>,
        state: &OptState<T>,
        params: &ParamTree<T>,
        lr: T,
    ) -> Result<(ParamTree<T>, OptState<T>)> {
        check_inputs(grads, state, params, 2)?;
        let (b1, b2, eps) = (T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps));
        let t = state.step + 1;
        let c1 = T::one() - b1.powi(t as i32);
        let c2 = T::one() - b2.powi(t as i32);
        let g = grads.flatten();
        let mut m = state.slots[0].flatten();
        let mut v = state.slots[1].flatten();
        let mut p = params.flatten();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok((
            params.unflatten_like(&p)?,
            OptState {
                step: t,
                slots: vec![params.unflatten_like(&m)?, params.unflatten_like(&v)?],
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Yogi {
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Yogi {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_beta("beta1", beta1)?;
        check_beta("beta2", beta2)?;
        check_eps(eps)?;
        Ok(Self { beta1, beta2, eps })
    }
}

impl Default for Yogi {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-3,
        }
    }
}

impl<T: Scalar> Optimizer<T> for Yogi {
    fn name(&self) -> &'static str {
        "yogi"
    }

    fn init(&self, params: &ParamTree<T>) -> OptState<T> {
        OptState {
            step: 0,
            slots: vec![params.zeros_like(), params.zeros_like()],
        }
    }

    fn step(
        &self,
        grads: &ParamTree<T>,
        state: &OptState<T>,
        params: &ParamTree<T>,
        lr: T,
    ) -> Result<(ParamTree<T>, OptState<T>)> {
        check_inputs(grads, state, params, 2)?;
        let (b1, b2, eps) = (T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps));
        let g = grads.flatten();
        let mut m = state.slots[0].flatten();
        let mut v = state.slots[1].flatten();
        let mut p = params.flatten();
        for i in 0..p.len() {
            let g2 = g[i] * g[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = v[i] - (T::one() - b2) * (v[i] - g2).sign() * g2;
            p[i] = p[i] - lr * m[i] / (v[i].sqrt() + eps);
        }
        Ok((
            params.unflatten_like(&p)?,
            OptState {
                step: state.step + 1,
                slots: vec![params.unflatten_like(&m)?, params.unflatten_like(&v)?],
            },
        ))
    }
}
