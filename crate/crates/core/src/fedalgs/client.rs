use crate::data::{shuffle_repeat_batch, Batch, ClientDataset, ShuffleRepeatSpec};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::Rng;
use crate::runner::ClientSpec;
use crate::scalar::Scalar;
use crate::tree::ParamTree;

/// Local training hyperparameters: batch size `B`, epochs `E`, client
/// learning rate `η_c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientUpdateConfig {
    pub batch_size: usize,
    pub num_epochs: usize,
    pub client_lr: f64,
}

impl ClientUpdateConfig {
    pub fn new(batch_size: usize, num_epochs: usize, client_lr: f64) -> Result<Self> {
        let cfg = Self {
            batch_size,
            num_epochs,
            client_lr,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `B` and `E` must be positive; `η_c = 0` is allowed and freezes the
    /// client.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.num_epochs == 0 {
            return Err(Error::InvalidHyperparameter(format!(
                "batch_size and num_epochs must be positive, got {} and {}",
                self.batch_size, self.num_epochs
            )));
        }
        if !(self.client_lr >= 0.0 && self.client_lr.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "client_lr must be finite and >= 0, got {}",
                self.client_lr
            )));
        }
        Ok(())
    }

    pub fn shuffle_spec(&self) -> ShuffleRepeatSpec {
        ShuffleRepeatSpec::epochs(self.batch_size, self.num_epochs)
    }
}

/// Result of local training on one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T = f64> {
    /// `w - w'`.
    pub delta: ParamTree<T>,
    /// `n_k`, the client's example count.
    pub weight: T,
    pub num_steps: usize,
    /// Mean of the batch losses evaluated before each step; `None` when no
    /// step was taken.
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LocalState<T> {
    params: ParamTree<T>,
    steps: usize,
    loss_sum: f64,
}

/// Per-client training output before the example weight is attached.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutput<T> {
    pub delta: ParamTree<T>,
    pub num_steps: usize,
    pub train_loss: Option<f64>,
}

impl<T> LocalOutput<T> {
    pub fn with_weight(self, weight: T) -> ClientUpdate<T> {
        ClientUpdate {
            delta: self.delta,
            weight,
            num_steps: self.num_steps,
            train_loss: self.train_loss,
        }
    }
}

/// Minibatch SGD on the client, starting from the server parameters.
pub struct FedAvgClient<'m, M: ?Sized, T> {
    model: &'m M,
    lr: T,
}

impl<'m, M: Model<T> + ?Sized, T: Scalar> FedAvgClient<'m, M, T> {
    pub fn new(model: &'m M, client_lr: f64) -> Self {
        Self {
            model,
            lr: T::lit(client_lr),
        }
    }
}

impl<M: Model<T> + ?Sized, T: Scalar> ClientSpec<T> for FedAvgClient<'_, M, T> {
    type State = LocalState<T>;
    type Output = LocalOutput<T>;

    fn client_init(&self, server_params: &ParamTree<T>, _rng: Rng) -> Result<LocalState<T>> {
        Ok(LocalState {
            params: server_params.clone(),
            steps: 0,
            loss_sum: 0.0,
        })
    }

    fn client_step(&self, state: LocalState<T>, batch: &Batch<T>) -> Result<LocalState<T>> {
        let (loss, grad) = self.model.loss_and_grad(&state.params, batch)?;
        let lr = self.lr;
        let params = state.params.zip_map(&grad, move |p, g| p - lr * g)?;
        Ok(LocalState {
            params,
            steps: state.steps + 1,
            loss_sum: state.loss_sum + loss.as_f64(),
        })
    }

    fn client_final(&self, server_params: &ParamTree<T>, state: LocalState<T>) -> Result<LocalOutput<T>> {
        let delta = server_params.zip_map(&state.params, |w, w1| w - w1)?;
        let train_loss = (state.steps > 0).then(|| state.loss_sum / state.steps as f64);
        Ok(LocalOutput {
            delta,
            num_steps: state.steps,
            train_loss,
        })
    }
}

/// `E` epochs of minibatch SGD from `w` over batches drawn from
/// `rng/batches`; returns `(w - w', |S_k|)` plus bookkeeping.
///
/// Batches follow [`crate::data::shuffle_repeat_batch`] in epoch mode, so a
/// client with `n·E < B` takes no step and returns a zero delta while still
/// carrying weight `n`.
pub fn client_update<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    w: &ParamTree<T>,
    ds: &ClientDataset<T>,
    cfg: &ClientUpdateConfig,
    rng: Rng,
) -> Result<ClientUpdate<T>> {
    cfg.validate()?;
    if ds.num_examples() == 0 {
        return Err(Error::EmptyDataset);
    }
    let spec = FedAvgClient::new(model, cfg.client_lr);
    let batches = shuffle_repeat_batch(ds, &cfg.shuffle_spec(), rng.split("batches"))?;
    let mut state = spec.client_init(w, rng)?;
    for b in batches {
        state = spec.client_step(state, &b)?;
    }
    Ok(spec
        .client_final(w, state)?
        .with_weight(T::from_count(ds.num_examples())))
}
