//! Experiment configuration in TOML.
//!
//! ```toml
//! seed = 7
//! rounds = 200
//! clients_per_round = 10
//! algorithm = "fed_avg"          # or "fed_opt"
//! server_lr = 1.0
//! eval_every = 20                # 0 never evaluates
//! backend = "parallel:4"         # or "sequential"
//! output_dir = "runs/linear"     # relative to this file
//!
//! [dataset]
//! source = "synthetic"           # or "file" with `path = ...`
//! num_clients = 100
//! sizes = { kind = "fixed", n = 20 }
//! task = { kind = "linear", num_features = 10, noise = 0.01 }
//!
//! [model]
//! kind = "linear"
//! num_features = 10
//!
//! [client]
//! batch_size = 10
//! num_epochs = 1
//! lr = 0.1
//! ```
//!
//! Optional tables: `eval_dataset`, `init`, `server_optimizer`,
//! `aggregator`, `bench`. Unknown keys are errors. Relative paths are
//! resolved against the directory of the config file, and the resolved
//! config written next to the run outputs parses back to the same value.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use fedsim_core::models::Activation;
use fedsim_core::runner::Backend;

use crate::error::{ExpError, Result};
use crate::synthetic::SyntheticFedSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    FedAvg,
    FedOpt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    File { path: PathBuf },
    Synthetic(SyntheticFedSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear {
        num_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Logistic {
        num_features: usize,
        num_classes: usize,
    },
    Mlp {
        /// `[inputs, hidden..., classes]`.
        layer_sizes: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: String,
    },
}

fn yes() -> bool {
    true
}

fn default_activation() -> String {
    "relu".into()
}

impl ModelSpec {
    pub fn num_features(&self) -> usize {
        match self {
            ModelSpec::Linear { num_features, .. } | ModelSpec::Logistic { num_features, .. } => {
                *num_features
            }
            ModelSpec::Mlp { layer_sizes, .. } => layer_sizes.first().copied().unwrap_or(0),
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::Linear { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// The model's own initializer.
    #[default]
    Default,
    /// Every parameter set to `value`.
    Constant { value: f64 },
    /// Every parameter drawn from `N(0, stddev²)`.
    Normal { stddev: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub batch_size: usize,
    #[serde(default = "one")]
    pub num_epochs: usize,
    pub lr: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    #[default]
    Sgd,
    Adagrad {
        #[serde(default = "eps_adaptive")]
        eps: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps_adam")]
        eps: f64,
    },
    Yogi {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps_adaptive")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn eps_adam() -> f64 {
    1e-8
}

fn eps_adaptive() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    #[default]
    Mean,
    Quantize {
        num_levels: u64,
    },
    ClipNoise {
        clip_norm: f64,
        #[serde(default)]
        noise_stddev: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub cohort_sizes: Vec<usize>,
    #[serde(default = "default_bench_backends", with = "backend_list")]
    pub backends: Vec<Backend>,
    #[serde(default = "two")]
    pub warmup_rounds: usize,
    #[serde(default = "ten")]
    pub measured_rounds: usize,
}

fn default_bench_backends() -> Vec<Backend> {
    vec![Backend::Sequential, Backend::Parallel(8)]
}

fn two() -> usize {
    2
}

fn ten() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub clients_per_round: usize,
    #[serde(default)]
    pub algorithm: Algorithm,
    pub server_lr: f64,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    #[serde(default, with = "backend_str")]
    pub backend: Backend,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<DatasetSpec>,
    pub model: ModelSpec,
    #[serde(default)]
    pub init: InitSpec,
    pub client: ClientConfig,
    #[serde(default)]
    pub server_optimizer: OptimizerSpec,
    #[serde(default)]
    pub aggregator: AggregatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSpec>,
}

fn default_eval_batch_size() -> usize {
    64
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

mod backend_str {
    use super::*;

    pub fn serialize<S: Serializer>(b: &Backend, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(b)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Backend, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

mod backend_list {
    use super::*;

    pub fn serialize<S: Serializer>(bs: &[Backend], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(bs.iter().map(|b| b.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<Backend>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

fn check(ok: bool, path: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ExpError::config(path, msg()))
    }
}

fn nonneg(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

fn check_dataset(spec: &DatasetSpec, prefix: &str) -> Result<()> {
    match spec {
        DatasetSpec::File { path } => check(
            !path.as_os_str().is_empty(),
            &format!("{prefix}.path"),
            || "must not be empty".into(),
        ),
        DatasetSpec::Synthetic(s) => s.validate(&format!("{prefix}.")),
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses TOML without validating or resolving paths.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| ExpError::config("<document>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." {
                "<document>".to_string()
            } else {
                path
            };
            ExpError::config(path, e.into_inner().message().trim().to_string())
        })
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExpError::config("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        let base = fs::canonicalize(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        for ds in std::iter::once(&mut self.dataset).chain(self.eval_dataset.as_mut()) {
            if let DatasetSpec::File { path } = ds {
                resolve(base, path);
            }
        }
    }

    /// Fills in the data seed so that the resolved config fully determines
    /// the datasets.
    pub fn pin_data_seeds(&mut self) {
        let seed = self.seed;
        for ds in std::iter::once(&mut self.dataset).chain(self.eval_dataset.as_mut()) {
            if let DatasetSpec::Synthetic(s) = ds {
                s.seed.get_or_insert(seed);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.rounds >= 1, "rounds", || "must be >= 1".into())?;
        check(self.clients_per_round >= 1, "clients_per_round", || {
            "must be >= 1".into()
        })?;
        check(nonneg(self.server_lr), "server_lr", || {
            format!("must be finite and >= 0, got {}", self.server_lr)
        })?;
        check(self.eval_batch_size >= 1, "eval_batch_size", || {
            "must be >= 1".into()
        })?;
        check(self.client.batch_size >= 1, "client.batch_size", || {
            "must be >= 1".into()
        })?;
        check(self.client.num_epochs >= 1, "client.num_epochs", || {
            "must be >= 1".into()
        })?;
        check(nonneg(self.client.lr), "client.lr", || {
            format!("must be finite and >= 0, got {}", self.client.lr)
        })?;
        check_dataset(&self.dataset, "dataset")?;
        if let Some(e) = &self.eval_dataset {
            check_dataset(e, "eval_dataset")?;
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            check(
                self.clients_per_round <= s.num_clients,
                "clients_per_round",
                || {
                    format!(
                        "{} exceeds dataset.num_clients = {}",
                        self.clients_per_round, s.num_clients
                    )
                },
            )?;
        }

        match &self.model {
            ModelSpec::Linear { num_features, .. } => {
                check(*num_features >= 1, "model.num_features", || {
                    "must be >= 1".into()
                })?
            }
            ModelSpec::Logistic {
                num_features,
                num_classes,
            } => {
                check(*num_features >= 1, "model.num_features", || {
                    "must be >= 1".into()
                })?;
                check(*num_classes >= 2, "model.num_classes", || {
                    "must be >= 2".into()
                })?;
            }
            ModelSpec::Mlp {
                layer_sizes,
                activation,
            } => {
                check(
                    layer_sizes.len() >= 3
                        && !layer_sizes.contains(&0)
                        && layer_sizes[layer_sizes.len() - 1] >= 2,
                    "model.layer_sizes",
                    || {
                        format!("need [inputs, hidden..., classes >= 2], all positive; got {layer_sizes:?}")
                    },
                )?;
                activation
                    .parse::<Activation>()
                    .map_err(|e| ExpError::config("model.activation", e.to_string()))?;
            }
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            check(
                s.num_features() == self.model.num_features(),
                "model.num_features",
                || {
                    format!(
                        "model expects {} features, dataset has {}",
                        self.model.num_features(),
                        s.num_features()
                    )
                },
            )?;
            let classifier_data = matches!(s.task, crate::synthetic::Task::Classification { .. });
            check(
                classifier_data == self.model.is_classifier(),
                "model.kind",
                || "model kind does not match the dataset task".into(),
            )?;
        }

        match self.init {
            InitSpec::Constant { value } => {
                check(value.is_finite(), "init.value", || "must be finite".into())?
            }
            InitSpec::Normal { stddev } => check(nonneg(stddev), "init.stddev", || {
                "must be finite and >= 0".into()
            })?,
            InitSpec::Default => {}
        }

        match self.server_optimizer {
            OptimizerSpec::Sgd => {}
            OptimizerSpec::Adagrad { eps } => {
                check(eps > 0.0, "server_optimizer.eps", || "must be > 0".into())?
            }
            OptimizerSpec::Adam { beta1, beta2, eps }
            | OptimizerSpec::Yogi { beta1, beta2, eps } => {
                check(
                    (0.0..1.0).contains(&beta1),
                    "server_optimizer.beta1",
                    || "must lie in [0, 1)".into(),
                )?;
                check(
                    (0.0..1.0).contains(&beta2),
                    "server_optimizer.beta2",
                    || "must lie in [0, 1)".into(),
                )?;
                check(eps > 0.0 && eps.is_finite(), "server_optimizer.eps", || {
                    "must be > 0".into()
                })?;
            }
        }
        if self.algorithm == Algorithm::FedAvg {
            check(
                self.server_optimizer == OptimizerSpec::Sgd,
                "server_optimizer.kind",
                || {
                    "fed_avg uses the sgd server update; set algorithm = \"fed_opt\" for adaptive servers".into()
                },
            )?;
        }

        match self.aggregator {
            AggregatorSpec::Mean => {}
            AggregatorSpec::Quantize { num_levels } => {
                check(num_levels >= 2, "aggregator.num_levels", || {
                    "must be >= 2".into()
                })?
            }
            AggregatorSpec::ClipNoise {
                clip_norm,
                noise_stddev,
            } => {
                check(
                    clip_norm > 0.0 && clip_norm.is_finite(),
                    "aggregator.clip_norm",
                    || "must be > 0".into(),
                )?;
                check(nonneg(noise_stddev), "aggregator.noise_stddev", || {
                    "must be finite and >= 0".into()
                })?;
            }
        }

        if let Some(b) = &self.bench {
            check(
                !b.cohort_sizes.is_empty() && !b.cohort_sizes.contains(&0),
                "bench.cohort_sizes",
                || "need at least one positive cohort size".into(),
            )?;
            check(!b.backends.is_empty(), "bench.backends", || {
                "need at least one backend".into()
            })?;
            check(b.measured_rounds >= 1, "bench.measured_rounds", || {
                "must be >= 1".into()
            })?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
rounds = 5
clients_per_round = 2
server_lr = 1.0

[dataset]
source = "synthetic"
num_clients = 4
sizes = { kind = "fixed", n = 6 }
task = { kind = "linear", num_features = 2 }

[model]
kind = "linear"
num_features = 2

[client]
batch_size = 3
lr = 0.1
"#;

    fn err_path(text: &str) -> String {
        let e = ExperimentConfig::parse(text).and_then(|c| c.validate().map(|_| c));
        match e {
            Err(ExpError::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.algorithm, Algorithm::FedAvg);
        assert_eq!(c.backend, Backend::Sequential);
        assert_eq!(c.client.num_epochs, 1);
        assert_eq!(c.aggregator, AggregatorSpec::Mean);
        assert_eq!(c.init, InitSpec::Default);
        assert_eq!(c.eval_every, 0);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.pin_data_seeds();
        c.bench = Some(BenchSpec {
            cohort_sizes: vec![1, 2],
            backends: vec![Backend::Sequential, Backend::Parallel(3)],
            warmup_rounds: 2,
            measured_rounds: 10,
        });
        c.server_optimizer = OptimizerSpec::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        c.algorithm = Algorithm::FedOpt;
        c.server_lr = 0.1 + 0.2;
        let text = c.to_toml();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c, "{text}");
    }

    #[test]
    fn seed_is_mandatory() {
        assert_eq!(err_path(&MINIMAL.replace("seed = 3", "")), "<document>");
    }

    #[test]
    fn unknown_field_is_named() {
        assert_eq!(
            err_path(&MINIMAL.replace("lr = 0.1", "lr = 0.1\nmomentum = 0.9")),
            "client.momentum"
        );
    }

    #[test]
    fn semantic_errors_have_paths() {
        assert_eq!(
            err_path(&MINIMAL.replace("batch_size = 3", "batch_size = 0")),
            "client.batch_size"
        );
        assert_eq!(
            err_path(&MINIMAL.replace("clients_per_round = 2", "clients_per_round = 9")),
            "clients_per_round"
        );
        assert_eq!(
            err_path(&MINIMAL.replace(
                "num_features = 2\n\n[client]",
                "num_features = 3\n\n[client]"
            )),
            "model.num_features"
        );
        assert_eq!(
            err_path(&format!("{MINIMAL}\n[server_optimizer]\nkind = \"adam\"\n")),
            "server_optimizer.kind"
        );
        assert_eq!(
            err_path(&MINIMAL.replace("server_lr = 1.0", "server_lr = -1.0")),
            "server_lr"
        );
        assert_eq!(
            err_path(&MINIMAL.replace("n = 6", "n = 0")),
            "dataset.sizes.n"
        );
    }

    #[test]
    fn bad_backend_string() {
        assert_eq!(
            err_path(&MINIMAL.replace("server_lr = 1.0", "server_lr = 1.0\nbackend = \"gpu\"")),
            "backend"
        );
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut c = ExperimentConfig::parse(&MINIMAL.replace(
            "source = \"synthetic\"\nnum_clients = 4\nsizes = { kind = \"fixed\", n = 6 }\ntask = { kind = \"linear\", num_features = 2 }",
            "source = \"file\"\npath = \"data/train.fds\"",
        ))
        .unwrap();
        c.resolve_paths(Path::new("/tmp/exp"));
        assert_eq!(
            c.dataset,
            DatasetSpec::File {
                path: PathBuf::from("/tmp/exp/data/train.fds")
            }
        );
        assert_eq!(c.output_dir, PathBuf::from("/tmp/exp/out"));
    }
}
