//! Server-side combination of weighted client deltas.
//!
//! Every aggregator receives the raw `(Δ_k, n_k)` pairs in client-id order,
//! so compression and noise act on individual deltas before averaging.

use std::fmt::Debug;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tree::{tree_weighted_sum, ParamTree};

pub trait Aggregator<T: Scalar>: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn aggregate(&self, deltas: &[(ParamTree<T>, T)], rng: Rng) -> Result<ParamTree<T>>;
}

fn check_cohort<T: Scalar>(deltas: &[(ParamTree<T>, T)]) -> Result<T> {
    let ((first, _), rest) = deltas.split_first().ok_or(Error::EmptyCohort)?;
    for (d, _) in rest {
        first.check_congruent(d)?;
    }
    if let Some((_, w)) = deltas.iter().find(|(_, w)| !(*w >= T::zero() && w.is_finite())) {
        return Err(Error::InvalidInput(format!("client weight must be finite and >= 0, got {w}")));
    }
    let total = deltas.iter().fold(T::zero(), |a, (_, w)| a + *w);
    if total <= T::zero() {
        return Err(Error::ZeroTotalWeight);
    }
    Ok(total)
}

/// `Σ (n_k / Σn) Δ_k`, accumulated in input order and clamped elementwise to
/// the range spanned by the inputs.
fn weighted_mean<T: Scalar>(deltas: &[(ParamTree<T>, T)], total: T) -> Result<ParamTree<T>> {
    let terms: Vec<(&ParamTree<T>, T)> = deltas.iter().map(|(d, w)| (d, *w / total)).collect();
    let mean = tree_weighted_sum(&terms)?.flatten();
    let flat: Vec<Vec<T>> = deltas.iter().map(|(d, _)| d.flatten()).collect();
    let clamped: Vec<T> = mean
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) = flat
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), f| (lo.min(f[i]), hi.max(f[i])));
            // rounding in the normalized weights can push the sum an ulp
            // outside the hull
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
        .collect();
    deltas[0].0.unflatten_like(&clamped)
}

/// Example-weighted mean of the client deltas.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanAggregator;

impl<T: Scalar> Aggregator<T> for MeanAggregator {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn aggregate(&self, deltas: &[(ParamTree<T>, T)], _rng: Rng) -> Result<ParamTree<T>> {
        let total = check_cohort(deltas)?;
        weighted_mean(deltas, total)
    }
}

/// Stochastic uniform quantization of every delta to `num_levels` levels
/// spanning the delta's own `[min, max]`, then the weighted mean.
///
/// A value between two levels rounds up with probability equal to its
/// fractional position, so each quantized delta is unbiased.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizeAggregator {
    num_levels: u64,
}

impl QuantizeAggregator {
    pub fn new(num_levels: u64) -> Result<Self> {
        if num_levels < 2 {
            return Err(Error::InvalidHyperparameter(format!("num_levels must be >= 2, got {num_levels}")));
        }
        Ok(Self { num_levels })
    }

    pub fn num_levels(&self) -> u64 {
        self.num_levels
    }

    /// Quantizes one delta with draws from `rng`.
    pub fn quantize<T: Scalar>(&self, delta: &ParamTree<T>, mut rng: Rng) -> Result<ParamTree<T>> {
        let flat: Vec<f64> = delta.flatten().iter().map(|v| v.as_f64()).collect();
        let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) || !(hi - lo).is_finite() {
            return Ok(delta.clone());
        }
        let step = (hi - lo) / (self.num_levels - 1) as f64;
        let out: Vec<T> = flat
            .iter()
            .map(|&x| {
                let pos = (x - lo) / step;
                let below = pos.floor();
                let frac = pos - below;
                if frac == 0.0 {
                    return T::lit(x);
                }
                let level = if rng.uniform() < frac { below + 1.0 } else { below };
                T::lit((lo + level * step).clamp(lo, hi))
            })
            .collect();
        delta.unflatten_like(&out)
    }
}

impl<T: Scalar> Aggregator<T> for QuantizeAggregator {
    fn name(&self) -> &'static str {
        "quantize"
    }

    fn aggregate(&self, deltas: &[(ParamTree<T>, T)], rng: Rng) -> Result<ParamTree<T>> {
        let total = check_cohort(deltas)?;
        let rng = rng.split("quantize");
        let quantized = deltas
            .iter()
            .enumerate()
            .map(|(k, (d, w))| Ok((self.quantize(d, rng.split(k))?, *w)))
            .collect::<Result<Vec<_>>>()?;
        weighted_mean(&quantized, total)
    }
}

/// Clips every delta to global ℓ2 norm `clip_norm`, takes the weighted mean
/// and adds `N(0, (noise_stddev·clip_norm / Σn)²)` to every element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipNoiseAggregator {
    clip_norm: f64,
    noise_stddev: f64,
}

impl ClipNoiseAggregator {
    pub fn new(clip_norm: f64, noise_stddev: f64) -> Result<Self> {
        if !(clip_norm > 0.0 && clip_norm.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!("clip_norm must be positive, got {clip_norm}")));
        }
        if !(noise_stddev >= 0.0 && noise_stddev.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "noise_stddev must be >= 0, got {noise_stddev}"
            )));
        }
        Ok(Self {
            clip_norm,
            noise_stddev,
        })
    }

    pub fn clip<T: Scalar>(&self, delta: &ParamTree<T>) -> ParamTree<T> {
        let norm = delta.l2_norm().as_f64();
        if norm <= self.clip_norm {
            delta.clone()
        } else {
            delta.scale(T::lit(self.clip_norm / norm))
        }
    }
}

impl<T: Scalar> Aggregator<T> for ClipNoiseAggregator {
    fn name(&self) -> &'static str {
        "clip_noise"
    }

    fn aggregate(&self, deltas: &[(ParamTree<T>, T)], rng: Rng) -> Result<ParamTree<T>> {
        let total = check_cohort(deltas)?;
        let clipped: Vec<_> = deltas.iter().map(|(d, w)| (self.clip(d), *w)).collect();
        let mean = weighted_mean(&clipped, total)?;
        if self.noise_stddev == 0.0 {
            return Ok(mean);
        }
        let std = self.noise_stddev * self.clip_norm / total.as_f64();
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidHyperparameter(format!("noise distribution: {e}")))?;
        let mut r = rng.split("noise");
        let noisy: Vec<T> = mean
            .flatten()
            .into_iter()
            .map(|v| v + T::lit(normal.sample(&mut r)))
            .collect();
        mean.unflatten_like(&noisy)
    }
}
