use std::fs;
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use fedsim_core::data::{FederatedData, PaddedBatchSpec, FEATURES, TARGETS};
use fedsim_core::fedalgs::{
    Aggregator, ClientUpdateConfig, ClipNoiseAggregator, FederatedTrainer, MeanAggregator,
    QuantizeAggregator,
};
use fedsim_core::models::{
    evaluate, Accuracy, Activation, CrossEntropy, LinearRegression, LogisticClassifier, Metric,
    MetricReport, Mlp, Model, SquaredError,
};
use fedsim_core::optim::{Adagrad, Adam, Optimizer, Sgd, Yogi};
use fedsim_core::runner::Backend;
use fedsim_core::{ParamTree, Rng, RoundState};

use crate::config::{
    AggregatorSpec, Algorithm, DatasetSpec, ExperimentConfig, InitSpec, ModelSpec, OptimizerSpec,
};
use crate::error::{ExpError, Result};
use crate::io::{load_federated, save_params};
use crate::synthetic::generate_synthetic;

/// A dataset plus the true linear weights when known.
pub struct LoadedData {
    pub data: FederatedData,
    pub w_star: Option<Vec<f64>>,
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<LoadedData> {
    match spec {
        DatasetSpec::Synthetic(s) => {
            let out = generate_synthetic(s, seed)?;
            Ok(LoadedData {
                data: out.data,
                w_star: out.w_star,
            })
        }
        DatasetSpec::File { path } => {
            let (data, meta) = load_federated(path)?;
            let w_star = meta
                .get("w_star")
                .and_then(|w| serde_json::from_value(w.clone()).ok());
            Ok(LoadedData { data, w_star })
        }
    }
}

fn build_model(spec: &ModelSpec) -> Result<Box<dyn Model<f64>>> {
    Ok(match spec {
        ModelSpec::Linear { num_features, bias } => {
            let m = LinearRegression::new(*num_features);
            Box::new(if *bias { m } else { m.without_bias() })
        }
        ModelSpec::Logistic {
            num_features,
            num_classes,
        } => Box::new(LogisticClassifier::new(*num_features, *num_classes)?),
        ModelSpec::Mlp {
            layer_sizes,
            activation,
        } => {
            let act: Activation = activation.parse().map_err(|e: fedsim_core::Error| {
                ExpError::config("model.activation", e.to_string())
            })?;
            Box::new(Mlp::new(layer_sizes.clone(), act)?)
        }
    })
}

fn build_optimizer(spec: &OptimizerSpec) -> Result<Box<dyn Optimizer<f64>>> {
    Ok(match *spec {
        OptimizerSpec::Sgd => Box::new(Sgd),
        OptimizerSpec::Adagrad { eps } => Box::new(Adagrad::new(eps)?),
        OptimizerSpec::Adam { beta1, beta2, eps } => Box::new(Adam::new(beta1, beta2, eps)?),
        OptimizerSpec::Yogi { beta1, beta2, eps } => Box::new(Yogi::new(beta1, beta2, eps)?),
    })
}

fn build_aggregator(spec: &AggregatorSpec) -> Result<Box<dyn Aggregator<f64>>> {
    Ok(match *spec {
        AggregatorSpec::Mean => Box::new(MeanAggregator),
        AggregatorSpec::Quantize { num_levels } => Box::new(QuantizeAggregator::new(num_levels)?),
        AggregatorSpec::ClipNoise {
            clip_norm,
            noise_stddev,
        } => Box::new(ClipNoiseAggregator::new(clip_norm, noise_stddev)?),
    })
}

fn check_data(fd: &FederatedData, model: &ModelSpec, table: &str) -> Result<()> {
    if fd.is_empty() {
        return Err(ExpError::config(table, "dataset has no clients"));
    }
    for (id, ds) in fd.iter() {
        let x = ds.column(FEATURES).ok_or_else(|| {
            ExpError::config(table, format!("client `{id}` has no `{FEATURES}` column"))
        })?;
        if ds.column(TARGETS).is_none() {
            return Err(ExpError::config(
                table,
                format!("client `{id}` has no `{TARGETS}` column"),
            ));
        }
        if x.rank() != 2 || x.row_width() != model.num_features() {
            return Err(ExpError::config(
                "model.num_features",
                format!(
                    "model expects {} features, client `{id}` of `{table}` has shape {:?}",
                    model.num_features(),
                    x.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// A fully resolved experiment: data loaded, components built.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: FederatedData,
    pub eval: Option<FederatedData>,
    pub w_star: Option<Vec<f64>>,
    pub model: Box<dyn Model<f64>>,
    pub metrics: Vec<Box<dyn Metric<f64>>>,
    pub server_optimizer: Box<dyn Optimizer<f64>>,
    pub aggregator: Box<dyn Aggregator<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub train_loss: Option<f64>,
    /// Overall eval metrics when this round was scheduled for evaluation.
    pub eval: Option<IndexMap<String, f64>>,
    pub duration_s: f64,
}

pub struct RunOutcome {
    pub state: RoundState,
    pub records: Vec<RoundRecord>,
}

impl Experiment {
    pub fn build(mut config: ExperimentConfig) -> Result<Self> {
        config.pin_data_seeds();
        config.validate()?;
        let train = load_dataset(&config.dataset, config.seed)?;
        check_data(&train.data, &config.model, "dataset")?;
        if config.clients_per_round > train.data.num_clients() {
            return Err(ExpError::config(
                "clients_per_round",
                format!(
                    "{} exceeds the {} clients in the dataset",
                    config.clients_per_round,
                    train.data.num_clients()
                ),
            ));
        }
        let eval = match &config.eval_dataset {
            Some(spec) => {
                let e = load_dataset(spec, config.seed)?.data;
                check_data(&e, &config.model, "eval_dataset")?;
                Some(e)
            }
            None => None,
        };
        let metrics: Vec<Box<dyn Metric<f64>>> = if config.model.is_classifier() {
            vec![Box::new(Accuracy), Box::new(CrossEntropy)]
        } else {
            vec![Box::new(SquaredError)]
        };
        let server_optimizer = match config.algorithm {
            Algorithm::FedAvg => Box::new(Sgd),
            Algorithm::FedOpt => build_optimizer(&config.server_optimizer)?,
        };
        Ok(Self {
            model: build_model(&config.model)?,
            aggregator: build_aggregator(&config.aggregator)?,
            server_optimizer,
            metrics,
            train: train.data,
            eval,
            w_star: train.w_star,
            config,
        })
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.metrics.iter().map(|m| m.name().to_string()).collect()
    }

    pub fn client_config(&self) -> ClientUpdateConfig {
        ClientUpdateConfig {
            batch_size: self.config.client.batch_size,
            num_epochs: self.config.client.num_epochs,
            client_lr: self.config.client.lr,
        }
    }

    pub fn trainer(
        &self,
        backend: Backend,
        clients_per_round: usize,
    ) -> FederatedTrainer<'_, f64, dyn Model<f64>> {
        FederatedTrainer {
            model: self.model.as_ref(),
            client: self.client_config(),
            server_optimizer: self.server_optimizer.as_ref(),
            server_lr: self.config.server_lr,
            aggregator: self.aggregator.as_ref(),
            clients_per_round,
            backend,
        }
    }

    pub fn initial_params(&self) -> Result<Option<ParamTree>> {
        let rng = Rng::new(self.config.seed).split("init");
        Ok(match self.config.init {
            InitSpec::Default => None,
            InitSpec::Constant { value } => Some(self.model.init(rng).map(move |_| value)),
            InitSpec::Normal { stddev } => {
                let shape = self.model.init(rng);
                let normal = Normal::new(0.0, stddev)
                    .map_err(|e| ExpError::config("init.stddev", e.to_string()))?;
                let mut r = rng.split("normal");
                let values: Vec<f64> = (0..shape.num_elements())
                    .map(|_| normal.sample(&mut r))
                    .collect();
                Some(shape.unflatten_like(&values)?)
            }
        })
    }

    pub fn initial_state(
        &self,
        trainer: &FederatedTrainer<'_, f64, dyn Model<f64>>,
    ) -> Result<RoundState> {
        Ok(trainer.init_state(self.config.seed, self.initial_params()?)?)
    }

    pub fn evaluate(&self, params: &ParamTree) -> Result<MetricReport> {
        let fd = self.eval.as_ref().unwrap_or(&self.train);
        let spec = PaddedBatchSpec::with_default_buckets(self.config.eval_batch_size)?;
        let metrics: Vec<&dyn Metric<f64>> = self.metrics.iter().map(|m| m.as_ref()).collect();
        Ok(evaluate(self.model.as_ref(), params, fd, &metrics, &spec)?)
    }

    /// Runs all rounds, evaluating every `eval_every` rounds.
    pub fn run(&self) -> Result<RunOutcome> {
        let trainer = self.trainer(self.config.backend, self.config.clients_per_round);
        let mut state = self.initial_state(&trainer)?;
        let mut records = Vec::with_capacity(self.config.rounds as usize);
        for _ in 0..self.config.rounds {
            let start = Instant::now();
            let (next, diag) = trainer.run_round(&self.train, state)?;
            let duration_s = start.elapsed().as_secs_f64();
            state = next;
            let every = self.config.eval_every;
            let eval = if every > 0 && diag.round % every == 0 {
                Some(self.evaluate(&state.server_params)?.overall)
            } else {
                None
            };
            records.push(RoundRecord {
                round: diag.round,
                train_loss: diag.train_loss,
                eval,
                duration_s,
            });
        }
        Ok(RunOutcome { state, records })
    }

    /// `‖w − w*‖₂` for linear models on data with known true weights.
    pub fn w_star_distance(&self, params: &ParamTree) -> Option<f64> {
        let w_star = self.w_star.as_ref()?;
        let w = params.tensor("w")?.data();
        if !matches!(self.config.model, ModelSpec::Linear { .. }) || w.len() != w_star.len() {
            return None;
        }
        Some(
            w.iter()
                .zip(w_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| ExpError::io(path, e))
}

/// `metrics.csv`: round, train loss and the scheduled eval metrics. Holds no
/// wall-clock data, so reruns are byte-identical.
pub fn metrics_csv(records: &[RoundRecord], metric_names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["round".to_string(), "train_loss".to_string()];
    header.extend(metric_names.iter().map(|m| format!("eval_{m}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.round.to_string(), fmt_opt(r.train_loss)];
        row.extend(
            metric_names
                .iter()
                .map(|m| fmt_opt(r.eval.as_ref().and_then(|e| e.get(m).copied()))),
        );
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(
        w.into_inner()
            .map_err(|e| ExpError::Format(e.to_string()))?,
    )
    .expect("ascii"))
}

pub fn timing_csv(records: &[RoundRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "round_duration_s"])?;
    for r in records {
        w.write_record([r.round.to_string(), r.duration_s.to_string()])?;
    }
    Ok(String::from_utf8(
        w.into_inner()
            .map_err(|e| ExpError::Format(e.to_string()))?,
    )
    .expect("ascii"))
}

/// Whitespace-separated columns for gnuplot; missing values are `NaN`.
pub fn metrics_dat(records: &[RoundRecord], metric_names: &[String]) -> String {
    let na = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NaN".into());
    let mut out = String::from("# round train_loss");
    metric_names
        .iter()
        .for_each(|m| out.push_str(&format!(" eval_{m}")));
    out.push('\n');
    for r in records {
        out.push_str(&format!("{} {}", r.round, na(r.train_loss)));
        for m in metric_names {
            out.push_str(&format!(
                " {}",
                na(r.eval.as_ref().and_then(|e| e.get(m).copied()))
            ));
        }
        out.push('\n');
    }
    out
}

pub fn summary_json(exp: &Experiment, outcome: &RunOutcome) -> Value {
    let last_loss = outcome.records.iter().rev().find_map(|r| r.train_loss);
    let last_eval = outcome.records.iter().rev().find_map(|r| r.eval.clone());
    json!({
        "rounds": outcome.state.round_index,
        "final_train_loss": last_loss,
        "final_eval": last_eval,
        "w_star_distance": exp.w_star_distance(&outcome.state.server_params),
    })
}

/// Writes every run artifact into `dir`.
pub fn write_outputs(dir: &Path, exp: &Experiment, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
    let names = exp.metric_names();
    write_file(&dir.join("config.resolved.toml"), &exp.config.to_toml())?;
    write_file(
        &dir.join("metrics.csv"),
        &metrics_csv(&outcome.records, &names)?,
    )?;
    write_file(&dir.join("timing.csv"), &timing_csv(&outcome.records)?)?;
    write_file(
        &dir.join("metrics.dat"),
        &metrics_dat(&outcome.records, &names),
    )?;
    save_params(&dir.join("final_params.json"), &outcome.state.server_params)?;
    let mut summary = serde_json::to_string_pretty(&summary_json(exp, outcome))?;
    summary.push('\n');
    write_file(&dir.join("summary.json"), &summary)
}

/// Per-client and overall metrics as CSV.
pub fn report_csv(report: &MetricReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["client_id".to_string(), "num_examples".to_string()];
    header.extend(report.overall.keys().cloned());
    w.write_record(&header)?;
    for (id, values) in &report.per_client {
        let mut row = vec![id.to_string(), report.example_counts[id].to_string()];
        row.extend(values.values().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let total: usize = report.example_counts.values().sum();
    let mut row = vec!["overall".to_string(), total.to_string()];
    row.extend(report.overall.values().map(|v| v.to_string()));
    w.write_record(&row)?;
    Ok(String::from_utf8(
        w.into_inner()
            .map_err(|e| ExpError::Format(e.to_string()))?,
    )
    .expect("ascii"))
}
