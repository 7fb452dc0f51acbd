use std::time::Duration;

use crate::data::{sample_clients, shuffle_repeat_batch, ClientId, FederatedData};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::optim::{OptState, Optimizer, Sgd};
use crate::rng::Rng;
use crate::runner::{for_each_client_timed, Backend, ClientWorkItem};
use crate::scalar::Scalar;
use crate::tree::ParamTree;

use super::aggregators::Aggregator;
use super::client::{ClientUpdate, ClientUpdateConfig, FedAvgClient};

/// Server state between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState<T = f64> {
    pub server_params: ParamTree<T>,
    pub server_opt_state: OptState<T>,
    /// Number of completed rounds.
    pub round_index: u64,
    /// Root generator; round `t` draws from `rng/round/t`.
    pub rng: Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundDiagnostics {
    /// 1-based index of the round.
    pub round: u64,
    pub cohort: Vec<ClientId>,
    /// Example-weighted mean over the cohort of each client's mean pre-step
    /// batch loss. Clients that took no step are left out; `None` if no
    /// client stepped.
    pub train_loss: Option<f64>,
    pub total_steps: usize,
    /// ℓ2 norm of the aggregated delta.
    pub delta_norm: f64,
    pub duration: Duration,
    pub client_durations: Vec<(ClientId, Duration)>,
}

/// Everything a federated run needs apart from the model, the data and the
/// pluggable server components.
#[derive(Clone, Debug, PartialEq)]
pub struct FedAlgConfig {
    pub client: ClientUpdateConfig,
    pub server_lr: f64,
    pub clients_per_round: usize,
    pub rounds: u64,
    pub seed: u64,
    pub backend: Backend,
}

/// One federated round: sample, train locally, aggregate, update.
pub struct FederatedTrainer<'a, T: Scalar, M: ?Sized> {
    pub model: &'a M,
    pub client: ClientUpdateConfig,
    pub server_optimizer: &'a dyn Optimizer<T>,
    pub server_lr: T,
    pub aggregator: &'a dyn Aggregator<T>,
    pub clients_per_round: usize,
    pub backend: Backend,
}

impl<'a, T: Scalar, M: Model<T> + ?Sized> FederatedTrainer<'a, T, M> {
    /// Initial state for `seed`; `init` overrides the model's initializer,
    /// which otherwise draws from `rng/init`.
    pub fn init_state(&self, seed: u64, init: Option<ParamTree<T>>) -> Result<RoundState<T>> {
        let rng = Rng::new(seed);
        let params = init.unwrap_or_else(|| self.model.init(rng.split("init")));
        if !params.is_finite() {
            return Err(Error::NonFinite {
                context: "initial parameters".into(),
            });
        }
        Ok(RoundState {
            server_opt_state: self.server_optimizer.init(&params),
            server_params: params,
            round_index: 0,
            rng,
        })
    }

    pub fn run_round(&self, fd: &FederatedData<T>, state: RoundState<T>) -> Result<(RoundState<T>, RoundDiagnostics)> {
        self.client.validate()?;
        let t = state.round_index + 1;
        let round_rng = state.rng.split("round").split(t);

        let cohort = sample_clients(fd, self.clients_per_round, round_rng.split("sample"))?;
        let shuffle = self.client.shuffle_spec();
        let clients_rng = round_rng.split("client");
        let work = cohort
            .iter()
            .map(|id| {
                let ds = fd.client(id).expect("sampled from fd");
                let rng = clients_rng.split(id);
                let batches = shuffle_repeat_batch(ds, &shuffle, rng.split("batches"))
                    .map_err(|e| Error::ClientFailed {
                        client: id.clone(),
                        source: Box::new(e),
                    })?;
                Ok(ClientWorkItem::new(id.clone(), batches, rng))
            })
            .collect::<Result<Vec<_>>>()?;

        let spec = FedAvgClient::new(self.model, self.client.client_lr);
        let (outputs, timing) = for_each_client_timed(&spec, &state.server_params, work, self.backend)?;
        let updates: Vec<(ClientId, ClientUpdate<T>)> = outputs
            .into_iter()
            .map(|(id, out)| {
                let n = fd.client_size(&id).expect("sampled from fd");
                (id, out.with_weight(T::from_count(n)))
            })
            .collect();

        let (mut loss_sum, mut loss_weight) = (0.0, 0.0);
        for (_, u) in &updates {
            if let Some(l) = u.train_loss {
                loss_sum += u.weight.as_f64() * l;
                loss_weight += u.weight.as_f64();
            }
        }
        let total_steps = updates.iter().map(|(_, u)| u.num_steps).sum();

        let deltas: Vec<(ParamTree<T>, T)> = updates.into_iter().map(|(_, u)| (u.delta, u.weight)).collect();
        let mean_delta = self.aggregator.aggregate(&deltas, round_rng.split("aggregate"))?;
        let (params, opt_state) = self.server_optimizer.step(
            &mean_delta,
            &state.server_opt_state,
            &state.server_params,
            self.server_lr,
        )?;
        if !params.is_finite() {
            return Err(Error::NonFiniteParams { round: t });
        }

        let diagnostics = RoundDiagnostics {
            round: t,
            cohort,
            train_loss: (loss_weight > 0.0).then(|| loss_sum / loss_weight),
            total_steps,
            delta_norm: mean_delta.l2_norm().as_f64(),
            duration: timing.total,
            client_durations: timing.per_client,
        };
        let next = RoundState {
            server_params: params,
            server_opt_state: opt_state,
            round_index: t,
            rng: state.rng,
        };
        Ok((next, diagnostics))
    }

    /// Runs `rounds` rounds from `state`.
    pub fn run(
        &self,
        fd: &FederatedData<T>,
        mut state: RoundState<T>,
        rounds: u64,
    ) -> Result<(RoundState<T>, Vec<RoundDiagnostics>)> {
        let mut diags = Vec::with_capacity(rounds as usize);
        for _ in 0..rounds {
            let (next, d) = self.run_round(fd, state)?;
            state = next;
            diags.push(d);
        }
        Ok((state, diags))
    }
}

fn check_run(cfg: &FedAlgConfig) -> Result<()> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidHyperparameter("rounds must be >= 1".into()));
    }
    if cfg.clients_per_round == 0 {
        return Err(Error::InvalidHyperparameter("clients_per_round must be >= 1".into()));
    }
    if !(cfg.server_lr >= 0.0 && cfg.server_lr.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "server_lr must be finite and >= 0, got {}",
            cfg.server_lr
        )));
    }
    cfg.client.validate()
}

/// Federated averaging: `w ← w − η_s · Σ n_k Δ_k / Σ n_k`.
pub fn fed_avg<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    cfg: &FedAlgConfig,
    aggregator: &dyn Aggregator<T>,
    fd: &FederatedData<T>,
    init: Option<ParamTree<T>>,
) -> Result<(RoundState<T>, Vec<RoundDiagnostics>)> {
    fed_opt(model, cfg, &Sgd, aggregator, fd, init)
}

/// Federated averaging with the aggregated delta fed to `server_optimizer`
/// as a pseudo-gradient.
pub fn fed_opt<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    cfg: &FedAlgConfig,
    server_optimizer: &dyn Optimizer<T>,
    aggregator: &dyn Aggregator<T>,
    fd: &FederatedData<T>,
    init: Option<ParamTree<T>>,
) -> Result<(RoundState<T>, Vec<RoundDiagnostics>)> {
    check_run(cfg)?;
    let trainer = FederatedTrainer {
        model,
        client: cfg.client,
        server_optimizer,
        server_lr: T::lit(cfg.server_lr),
        aggregator,
        clients_per_round: cfg.clients_per_round,
        backend: cfg.backend,
    };
    let state = trainer.init_state(cfg.seed, init)?;
    trainer.run(fd, state, cfg.rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClientDataset;
    use crate::fedalgs::{MeanAggregator, QuantizeAggregator};
    use crate::models::LinearRegression;
    use crate::optim::{Adam, Yogi};
    use crate::tensor::Tensor;

    fn scalar_fd() -> FederatedData<f64> {
        let ds = ClientDataset::new([
            ("x", Tensor::new(vec![1, 1], vec![1.0]).unwrap()),
            ("y", Tensor::vector(vec![1.0]).unwrap()),
        ])
        .unwrap();
        FederatedData::from_clients([(ClientId::new("c0"), ds)]).unwrap()
    }

    fn w(v: f64) -> ParamTree<f64> {
        ParamTree::branch([("w", ParamTree::leaf(Tensor::vector(vec![v]).unwrap()))]).unwrap()
    }

    fn cfg(server_lr: f64, rounds: u64) -> FedAlgConfig {
        FedAlgConfig {
            client: ClientUpdateConfig::new(1, 1, 0.1).unwrap(),
            server_lr,
            clients_per_round: 1,
            rounds,
            seed: 0,
            backend: Backend::Sequential,
        }
    }

    fn noisy_fd(clients: usize, seed: u64) -> FederatedData<f64> {
        let mut r = Rng::new(seed);
        FederatedData::from_clients((0..clients).map(|k| {
            let n = 3 + k % 5;
            let x: Vec<f64> = (0..2 * n).map(|_| r.uniform() * 2.0 - 1.0).collect();
            let y: Vec<f64> = (0..n).map(|i| 2.0 * x[2 * i] - x[2 * i + 1] + 0.3).collect();
            let ds = ClientDataset::new([
                ("x", Tensor::new(vec![n, 2], x).unwrap()),
                ("y", Tensor::vector(y).unwrap()),
            ])
            .unwrap();
            (ClientId::new(format!("c{k:02}")), ds)
        }))
        .unwrap()
    }

    #[test]
    fn one_round_hand_value() {
        let m = LinearRegression::new(1).without_bias();
        let (state, diags) = fed_avg(&m, &cfg(0.01, 1), &MeanAggregator, &scalar_fd(), Some(w(0.5))).unwrap();
        assert!((state.server_params.flatten()[0] - 0.501).abs() < 1e-15);
        assert_eq!(state.round_index, 1);
        assert_eq!(diags[0].round, 1);
        assert_eq!(diags[0].train_loss, Some(0.25));
        assert_eq!(diags[0].total_steps, 1);
    }

    #[test]
    fn frozen_server() {
        let m = LinearRegression::new(2);
        let fd = noisy_fd(6, 1);
        let mut c = cfg(0.0, 5);
        c.clients_per_round = 3;
        let init = m.init(Rng::new(0)).map(|_| 0.25);
        let (state, _) = fed_avg(&m, &c, &MeanAggregator, &fd, Some(init.clone())).unwrap();
        assert_eq!(state.server_params, init);
    }

    #[test]
    fn fed_opt_with_sgd_is_fed_avg() {
        let m = LinearRegression::new(2);
        let fd = noisy_fd(8, 2);
        let mut c = cfg(0.7, 6);
        c.clients_per_round = 4;
        c.client = ClientUpdateConfig::new(2, 2, 0.05).unwrap();
        let a = fed_avg(&m, &c, &MeanAggregator, &fd, None).unwrap();
        let b = fed_opt(&m, &c, &Sgd, &MeanAggregator, &fd, None).unwrap();
        assert_eq!(a.0, b.0);
        let loss = |d: &[RoundDiagnostics]| d.iter().map(|r| r.train_loss).collect::<Vec<_>>();
        assert_eq!(loss(&a.1), loss(&b.1));
    }

    #[test]
    fn adam_server_first_step() {
        // a client delta of exactly 1: x = 1, y = 1, w = 0 gives grad -2, so
        // η_c = 0.5 moves the client to 1 and Δ = -1
        let m = LinearRegression::new(1).without_bias();
        let mut c = cfg(0.1, 1);
        c.client.client_lr = 0.5;
        let (state, diags) = fed_opt(&m, &c, &Adam::default(), &MeanAggregator, &scalar_fd(), Some(w(0.0))).unwrap();
        assert_eq!(diags[0].delta_norm, 1.0);
        assert!((state.server_params.flatten()[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_pseudo_gradient_keeps_params() {
        let m = LinearRegression::new(1).without_bias();
        let mut c = cfg(0.3, 4);
        c.client.client_lr = 0.0;
        for opt in [&Adam::default() as &dyn Optimizer<f64>, &Yogi::default(), &Sgd] {
            let (state, _) = fed_opt(&m, &c, opt, &MeanAggregator, &scalar_fd(), Some(w(0.42))).unwrap();
            assert_eq!(state.server_params, w(0.42));
        }
    }

    #[test]
    fn reruns_and_backends_are_identical() {
        let m = LinearRegression::new(2);
        let fd = noisy_fd(12, 3);
        let mut c = cfg(1.0, 5);
        c.clients_per_round = 5;
        c.client = ClientUpdateConfig::new(2, 1, 0.1).unwrap();
        let q = QuantizeAggregator::new(16).unwrap();
        let seq = fed_avg(&m, &c, &q, &fd, None).unwrap();
        c.backend = Backend::Parallel(3);
        let par = fed_avg(&m, &c, &q, &fd, None).unwrap();
        assert_eq!(seq.0, par.0);
        for (a, b) in seq.1.iter().zip(&par.1) {
            assert_eq!(a.cohort, b.cohort);
            assert_eq!(a.train_loss.map(f64::to_bits), b.train_loss.map(f64::to_bits));
        }
    }

    #[test]
    fn cohort_changes_between_rounds() {
        let m = LinearRegression::new(2);
        let fd = noisy_fd(20, 4);
        let mut c = cfg(1.0, 4);
        c.clients_per_round = 3;
        let (_, d) = fed_avg(&m, &c, &MeanAggregator, &fd, None).unwrap();
        assert!(d.windows(2).any(|p| p[0].cohort != p[1].cohort));
        assert!(d.iter().all(|r| r.cohort.len() == 3 && r.cohort.windows(2).all(|p| p[0] < p[1])));
    }

    #[test]
    fn divergence_reports_round() {
        let m = LinearRegression::new(2);
        let fd = noisy_fd(4, 5);
        let mut c = cfg(1.0, 50);
        c.clients_per_round = 4;
        c.client = ClientUpdateConfig::new(1, 5, 1e3).unwrap();
        match fed_avg(&m, &c, &MeanAggregator, &fd, None).unwrap_err() {
            Error::NonFiniteParams { round } => assert!(round >= 1),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn rejects_bad_run_config() {
        let m = LinearRegression::new(1).without_bias();
        assert!(fed_avg(&m, &cfg(0.1, 0), &MeanAggregator, &scalar_fd(), None).is_err());
        let mut c = cfg(0.1, 1);
        c.clients_per_round = 2;
        assert!(matches!(
            fed_avg(&m, &c, &MeanAggregator, &scalar_fd(), None),
            Err(Error::CohortTooLarge { .. })
        ));
    }
}
