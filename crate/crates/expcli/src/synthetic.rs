//! Seeded synthetic federated datasets.
//!
//! Every client draws from its own generator `seed/client/k`, so a client's
//! data does not depend on how many clients precede it.

use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use fedsim_core::data::{ClientDataset, ClientId, FederatedData, FEATURES, TARGETS};
use fedsim_core::{Rng, Tensor};

use crate::error::{ExpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeDist {
    Fixed {
        n: usize,
    },
    /// `max(1, round(exp(N(mu, sigma²))))`.
    LogNormal {
        mu: f64,
        sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// `y = ⟨w* + shift_k, x⟩ + ε` with `x ~ N(0, I)`, `ε ~ N(0, noise²)` and
    /// `shift_k ~ N(0, shift² I)` drawn once per client.
    Linear {
        num_features: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        shift: f64,
        /// Drawn from `N(0, I)` when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w_star: Option<Vec<f64>>,
    },
    /// Gaussian classes: `x = μ_y + N(0, I)` with class means
    /// `μ_c ~ N(0, separation² I)`; every client draws its label
    /// distribution from `Dirichlet(alpha)`.
    Classification {
        num_features: usize,
        num_classes: usize,
        alpha: f64,
        #[serde(default = "default_separation")]
        separation: f64,
    },
}

fn default_separation() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFedSpec {
    pub num_clients: usize,
    pub sizes: SizeDist,
    pub task: Task,
    /// Falls back to the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub data: FederatedData,
    /// True linear weights, for the linear task.
    pub w_star: Option<Vec<f64>>,
}

impl SyntheticFedSpec {
    pub fn num_features(&self) -> usize {
        match self.task {
            Task::Linear { num_features, .. } | Task::Classification { num_features, .. } => {
                num_features
            }
        }
    }

    /// Checks the spec; errors carry field paths below `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let err = |field: &str, msg: String| Err(ExpError::config(format!("{prefix}{field}"), msg));
        if self.num_clients == 0 {
            return err("num_clients", "must be >= 1".into());
        }
        match self.sizes {
            SizeDist::Fixed { n: 0 } => return err("sizes.n", "must be >= 1".into()),
            SizeDist::LogNormal { mu, sigma }
                if !(mu.is_finite() && sigma >= 0.0 && sigma.is_finite()) =>
            {
                return err(
                    "sizes",
                    format!("need finite mu and sigma >= 0, got mu={mu}, sigma={sigma}"),
                )
            }
            _ => {}
        }
        match &self.task {
            Task::Linear {
                num_features,
                noise,
                shift,
                w_star,
            } => {
                if *num_features == 0 {
                    return err("task.num_features", "must be >= 1".into());
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return err("task.noise", format!("must be >= 0, got {noise}"));
                }
                if !(*shift >= 0.0 && shift.is_finite()) {
                    return err("task.shift", format!("must be >= 0, got {shift}"));
                }
                if let Some(w) = w_star {
                    if w.len() != *num_features || !w.iter().all(|v| v.is_finite()) {
                        return err(
                            "task.w_star",
                            format!("need {num_features} finite values, got {w:?}"),
                        );
                    }
                }
            }
            Task::Classification {
                num_features,
                num_classes,
                alpha,
                separation,
            } => {
                if *num_features == 0 {
                    return err("task.num_features", "must be >= 1".into());
                }
                if *num_classes < 2 {
                    return err(
                        "task.num_classes",
                        format!("must be >= 2, got {num_classes}"),
                    );
                }
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return err("task.alpha", format!("must be positive, got {alpha}"));
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return err("task.separation", format!("must be >= 0, got {separation}"));
                }
            }
        }
        Ok(())
    }
}

/// Zero-padded so that lexicographic order is numeric order.
pub fn client_id(k: usize, num_clients: usize) -> ClientId {
    let width = (num_clients.saturating_sub(1)).to_string().len();
    ClientId::new(format!("client_{k:0width$}"))
}

fn normals(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn client_size(dist: &SizeDist, rng: &mut Rng) -> usize {
    match *dist {
        SizeDist::Fixed { n } => n,
        SizeDist::LogNormal { mu, sigma } => {
            let v = LogNormal::new(mu, sigma).expect("validated").sample(rng);
            (v.round() as usize).max(1)
        }
    }
}

fn dirichlet(rng: &mut Rng, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated");
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // all draws underflowed for tiny alpha: put the mass on one class
        let c = (rng.uniform() * k as f64) as usize;
        p = (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
    }
    p
}

fn categorical(rng: &mut Rng, p: &[f64]) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Generates the dataset described by `spec` with `seed` when the spec has
/// none of its own.
pub fn generate_synthetic(spec: &SyntheticFedSpec, default_seed: u64) -> Result<SyntheticData> {
    spec.validate("")?;
    let root = Rng::new(spec.seed.unwrap_or(default_seed));
    let d = spec.num_features();
    let mut data = FederatedData::new();

    let w_star = match &spec.task {
        Task::Linear { w_star, .. } => Some(
            w_star
                .clone()
                .unwrap_or_else(|| normals(&mut root.split("w_star"), d, 1.0)),
        ),
        Task::Classification { .. } => None,
    };
    let class_means = match spec.task {
        Task::Classification {
            num_classes,
            separation,
            ..
        } => normals(&mut root.split("class_means"), num_classes * d, separation),
        Task::Linear { .. } => Vec::new(),
    };

    for k in 0..spec.num_clients {
        let mut rng = root.split("client").split(k);
        let n = client_size(&spec.sizes, &mut rng);
        let (x, y) = match &spec.task {
            Task::Linear { noise, shift, .. } => {
                let w = w_star.as_ref().expect("linear task");
                let shift_k = normals(&mut rng, d, *shift);
                let x = normals(&mut rng, n * d, 1.0);
                let eps = normals(&mut rng, n, *noise);
                let y = (0..n)
                    .map(|i| {
                        let row = &x[i * d..(i + 1) * d];
                        let dot = (0..d).fold(0.0, |a, j| a + (w[j] + shift_k[j]) * row[j]);
                        dot + eps[i]
                    })
                    .collect();
                (x, y)
            }
            Task::Classification {
                num_classes, alpha, ..
            } => {
                let prior = dirichlet(&mut rng, *num_classes, *alpha);
                let mut x = Vec::with_capacity(n * d);
                let mut y = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = categorical(&mut rng, &prior);
                    let z = normals(&mut rng, d, 1.0);
                    x.extend((0..d).map(|j| class_means[c * d + j] + z[j]));
                    y.push(c as f64);
                }
                (x, y)
            }
        };
        let ds = ClientDataset::new([
            (FEATURES, Tensor::new(vec![n, d], x)?),
            (TARGETS, Tensor::vector(y)?),
        ])?;
        data.insert(client_id(k, spec.num_clients), ds)?;
    }
    Ok(SyntheticData { data, w_star })
}
