//! Per-client execution: `client_init`, then `client_step` folded over the
//! client's batches, then `client_final`, for every client of a cohort.
//!
//! The sequential and parallel backends return bit-identical results. Each
//! client's randomness comes from its own work item, the client functions
//! are pure, and results are sorted by client id rather than completion
//! order.

use std::fmt;
use std::marker::PhantomData;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use crate::data::{Batch, ClientId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tree::ParamTree;

/// The three functions defining per-client work. Implementations must be
/// pure: outputs depend only on the arguments.
pub trait ClientSpec<T: Scalar>: Sync {
    type State: Send;
    type Output: Send;

    fn client_init(&self, server_params: &ParamTree<T>, rng: Rng) -> Result<Self::State>;

    fn client_step(&self, state: Self::State, batch: &Batch<T>) -> Result<Self::State>;

    fn client_final(&self, server_params: &ParamTree<T>, state: Self::State) -> Result<Self::Output>;
}

/// A [`ClientSpec`] assembled from three closures.
pub struct ForEachClient<I, S, F, St, Out> {
    init: I,
    step: S,
    fin: F,
    _marker: PhantomData<fn() -> (St, Out)>,
}

impl<I, S, F, St, Out> ForEachClient<I, S, F, St, Out> {
    pub fn new(client_init: I, client_step: S, client_final: F) -> Self {
        Self {
            init: client_init,
            step: client_step,
            fin: client_final,
            _marker: PhantomData,
        }
    }
}

impl<T, I, S, F, St, Out> ClientSpec<T> for ForEachClient<I, S, F, St, Out>
where
    T: Scalar,
    I: Fn(&ParamTree<T>, Rng) -> Result<St> + Sync,
    S: Fn(St, &Batch<T>) -> Result<St> + Sync,
    F: Fn(&ParamTree<T>, St) -> Result<Out> + Sync,
    St: Send,
    Out: Send,
{
    type State = St;
    type Output = Out;

    fn client_init(&self, server_params: &ParamTree<T>, rng: Rng) -> Result<St> {
        (self.init)(server_params, rng)
    }

    fn client_step(&self, state: St, batch: &Batch<T>) -> Result<St> {
        (self.step)(state, batch)
    }

    fn client_final(&self, server_params: &ParamTree<T>, state: St) -> Result<Out> {
        (self.fin)(server_params, state)
    }
}

pub type BatchStream<'a, T> = Box<dyn Iterator<Item = Batch<T>> + Send + 'a>;

pub struct ClientWorkItem<'a, T> {
    pub client_id: ClientId,
    pub batches: BatchStream<'a, T>,
    pub rng: Rng,
}

impl<'a, T: Scalar> ClientWorkItem<'a, T> {
    pub fn new(client_id: ClientId, batches: impl Iterator<Item = Batch<T>> + Send + 'a, rng: Rng) -> Self {
        Self {
            client_id,
            batches: Box::new(batches),
            rng,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Backend {
    #[default]
    Sequential,
    /// Bounded pool of worker threads.
    Parallel(usize),
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Sequential => f.write_str("sequential"),
            Backend::Parallel(n) => write!(f, "parallel:{n}"),
        }
    }
}

impl FromStr for Backend {
    type Err = String;

    /// `sequential` or `parallel:N` with `N >= 1`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "sequential" {
            return Ok(Backend::Sequential);
        }
        match s.strip_prefix("parallel:").map(str::parse::<usize>) {
            Some(Ok(n)) if n >= 1 => Ok(Backend::Parallel(n)),
            _ => Err(format!("expected `sequential` or `parallel:N` with N >= 1, got `{s}`")),
        }
    }
}

/// Wall-clock timing of one cohort execution.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTiming {
    pub total: Duration,
    /// Sorted by client id.
    pub per_client: Vec<(ClientId, Duration)>,
}

impl RoundTiming {
    pub fn client_sum(&self) -> Duration {
        self.per_client.iter().map(|(_, d)| *d).sum()
    }
}

fn run_client<T: Scalar, S: ClientSpec<T>>(
    spec: &S,
    server_params: &ParamTree<T>,
    item: ClientWorkItem<'_, T>,
) -> (ClientId, Result<S::Output>, Duration) {
    let start = Instant::now();
    let ClientWorkItem {
        client_id,
        batches,
        rng,
    } = item;
    let result = (|| {
        let mut state = spec.client_init(server_params, rng)?;
        for b in batches {
            state = spec.client_step(state, &b)?;
        }
        spec.client_final(server_params, state)
    })();
    (client_id, result, start.elapsed())
}

/// Runs `spec` for every work item. Results are sorted by client id. The
/// first failing client (by id, among those that ran) aborts the call.
pub fn for_each_client<T: Scalar, S: ClientSpec<T>>(
    spec: &S,
    server_params: &ParamTree<T>,
    work: Vec<ClientWorkItem<'_, T>>,
    backend: Backend,
) -> Result<Vec<(ClientId, S::Output)>> {
    for_each_client_timed(spec, server_params, work, backend).map(|(out, _)| out)
}

/// [`for_each_client`] plus wall-clock timing of the whole cohort and of
/// every client.
pub fn for_each_client_timed<T: Scalar, S: ClientSpec<T>>(
    spec: &S,
    server_params: &ParamTree<T>,
    work: Vec<ClientWorkItem<'_, T>>,
    backend: Backend,
) -> Result<(Vec<(ClientId, S::Output)>, RoundTiming)> {
    let mut ids: Vec<&ClientId> = work.iter().map(|w| &w.client_id).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateClient(w[0].clone()));
    }

    let start = Instant::now();
    let mut raw = match backend {
        Backend::Sequential => {
            let mut out = Vec::with_capacity(work.len());
            for item in work {
                let r = run_client(spec, server_params, item);
                let failed = r.1.is_err();
                out.push(r);
                if failed {
                    break;
                }
            }
            out
        }
        Backend::Parallel(workers) => run_parallel(spec, server_params, work, workers.max(1)),
    };
    let total = start.elapsed();

    raw.sort_by(|a, b| a.0.cmp(&b.0));
    let mut results = Vec::with_capacity(raw.len());
    let mut per_client = Vec::with_capacity(raw.len());
    for (id, r, d) in raw {
        match r {
            Ok(out) => {
                per_client.push((id.clone(), d));
                results.push((id, out));
            }
            Err(e) => {
                return Err(Error::ClientFailed {
                    client: id,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok((results, RoundTiming { total, per_client }))
}

fn run_parallel<T: Scalar, S: ClientSpec<T>>(
    spec: &S,
    server_params: &ParamTree<T>,
    work: Vec<ClientWorkItem<'_, T>>,
    workers: usize,
) -> Vec<(ClientId, Result<S::Output>, Duration)> {
    let n = work.len();
    let queue = Mutex::new(work.into_iter());
    let failed = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            let tx = tx.clone();
            let (queue, failed) = (&queue, &failed);
            scope.spawn(move || loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let Some(item) = queue.lock().expect("work queue poisoned").next() else {
                    break;
                };
                let r = run_client(spec, server_params, item);
                if r.1.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                if tx.send(r).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        rx.iter().collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batch, ClientDataset, FederatedData, TARGETS};
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use rand::RngCore;

    fn leaf(v: f64) -> ParamTree<f64> {
        ParamTree::leaf(Tensor::vector(vec![v]).unwrap())
    }

    fn fd(n_clients: usize) -> FederatedData<f64> {
        let mut r = Rng::new(99);
        FederatedData::from_clients((0..n_clients).map(|k| {
            let n = 1 + (r.next_u32() % 9) as usize;
            let y = Tensor::vector((0..n).map(|_| r.uniform()).collect()).unwrap();
            (ClientId::new(format!("client_{k:02}")), ClientDataset::new([(TARGETS, y)]).unwrap())
        }))
        .unwrap()
    }

    /// Sums targets, plus a client-specific random draw so rng plumbing is
    /// observable in the output.
    fn summing_spec() -> impl ClientSpec<f64, Output = (f64, u64, usize)> {
        ForEachClient::new(
            |_: &ParamTree<f64>, mut rng: Rng| Ok((0.0, rng.next_u64(), 0usize)),
            |(acc, r, steps): (f64, u64, usize), b: &Batch<f64>| {
                let s: f64 = b.column(TARGETS).unwrap().data()[..b.num_real()].iter().sum();
                Ok((acc + s, r, steps + 1))
            },
            |server: &ParamTree<f64>, (acc, r, steps)| Ok((acc * server.flatten()[0], r, steps)),
        )
    }

    fn work<'a>(data: &'a FederatedData<f64>, round_rng: Rng) -> Vec<ClientWorkItem<'a, f64>> {
        data.iter()
            .map(|(id, ds)| ClientWorkItem::new(id.clone(), batch(ds, 2).unwrap().into_iter(), round_rng.split(id)))
            .collect()
    }

    #[test]
    fn linear_regression_walkthrough() {
        // client_init returns server params, client_step is one SGD step on
        // mean squared error, client_final returns server - client.
        let spec = ForEachClient::new(
            |server: &ParamTree<f64>, _rng: Rng| Ok(server.flatten()[0]),
            |w: f64, b: &Batch<f64>| {
                let (x, y) = (b.column("x").unwrap().data()[0], b.column("y").unwrap().data()[0]);
                let grad = 2.0 * (w * x - y) * x;
                Ok(w - 0.1 * grad)
            },
            |server: &ParamTree<f64>, w: f64| Ok(server.flatten()[0] - w),
        );
        let b = Batch::from_columns([
            ("x", Tensor::new(vec![1, 1], vec![1.0]).unwrap()),
            ("y", Tensor::vector(vec![1.0]).unwrap()),
        ])
        .unwrap();
        let item = ClientWorkItem::new(ClientId::new("only"), std::iter::once(b), Rng::new(0));
        let out = for_each_client(&spec, &leaf(0.5), vec![item], Backend::Sequential).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].1 - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn empty_stream_folds_to_init() {
        let spec = summing_spec();
        let item = ClientWorkItem::new(ClientId::new("a"), std::iter::empty(), Rng::new(1));
        let out = for_each_client(&spec, &leaf(2.0), vec![item], Backend::Sequential).unwrap();
        assert_eq!(out[0].1 .0, 0.0);
        assert_eq!(out[0].1 .2, 0);
    }

    #[test]
    fn backends_are_bit_identical() {
        let data = fd(20);
        let spec = summing_spec();
        let server = leaf(1.5);
        let round = Rng::new(5).split("round");
        let seq = for_each_client(&spec, &server, work(&data, round), Backend::Sequential).unwrap();
        for workers in [1, 2, 4, 7, 32] {
            let par = for_each_client(&spec, &server, work(&data, round), Backend::Parallel(workers)).unwrap();
            assert_eq!(seq.len(), par.len());
            for (a, b) in seq.iter().zip(&par) {
                assert_eq!(a.0, b.0);
                assert_eq!(a.1 .0.to_bits(), b.1 .0.to_bits());
                assert_eq!(a.1 .1, b.1 .1);
                assert_eq!(a.1 .2, b.1 .2);
            }
        }
        // rerun is identical too
        let again = for_each_client(&spec, &server, work(&data, round), Backend::Sequential).unwrap();
        assert!(seq.iter().zip(&again).all(|(a, b)| a.1 .0.to_bits() == b.1 .0.to_bits()));
    }

    #[test]
    fn results_sorted_regardless_of_input_order() {
        let data = fd(10);
        let spec = summing_spec();
        let mut items = work(&data, Rng::new(0));
        items.reverse();
        let out = for_each_client(&spec, &leaf(1.0), items, Backend::Parallel(3)).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn failing_client_aborts_with_id() {
        let spec = ForEachClient::new(
            |_: &ParamTree<f64>, _: Rng| Ok(()),
            |(), b: &Batch<f64>| {
                if b.column(TARGETS).unwrap().data()[0] > 0.5 {
                    Err(Error::InvalidInput("boom".into()))
                } else {
                    Ok(())
                }
            },
            |_: &ParamTree<f64>, ()| Ok(()),
        );
        let mk = |id: &str, y: f64| {
            let b = Batch::from_columns([(TARGETS, Tensor::vector(vec![y]).unwrap())]).unwrap();
            ClientWorkItem::new(ClientId::new(id), std::iter::once(b), Rng::new(0))
        };
        for backend in [Backend::Sequential, Backend::Parallel(2)] {
            let items = vec![mk("a", 0.1), mk("b", 0.9), mk("c", 0.2)];
            match for_each_client(&spec, &leaf(0.0), items, backend).unwrap_err() {
                Error::ClientFailed { client, .. } => assert_eq!(client.as_str(), "b"),
                e => panic!("unexpected {e:?}"),
            }
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let spec = summing_spec();
        let items = vec![
            ClientWorkItem::new(ClientId::new("a"), std::iter::empty(), Rng::new(0)),
            ClientWorkItem::new(ClientId::new("a"), std::iter::empty(), Rng::new(1)),
        ];
        assert!(matches!(
            for_each_client(&spec, &leaf(0.0), items, Backend::Sequential),
            Err(Error::DuplicateClient(_))
        ));
    }

    #[test]
    fn timing_is_positive_and_per_client() {
        let data = fd(8);
        let spec = summing_spec();
        for backend in [Backend::Sequential, Backend::Parallel(4)] {
            let (out, t) = for_each_client_timed(&spec, &leaf(1.0), work(&data, Rng::new(0)), backend).unwrap();
            assert!(t.total > Duration::ZERO);
            assert_eq!(t.per_client.len(), out.len());
        }
    }

    #[test]
    fn sequential_client_durations_cover_total() {
        let spec = ForEachClient::new(
            |_: &ParamTree<f64>, _: Rng| Ok(()),
            |(), _: &Batch<f64>| {
                let until = Instant::now() + Duration::from_micros(500);
                while Instant::now() < until {
                    std::hint::spin_loop();
                }
                Ok(())
            },
            |_: &ParamTree<f64>, ()| Ok(()),
        );
        let items: Vec<_> = (0..6)
            .map(|k| {
                let b = Batch::from_columns([(TARGETS, Tensor::vector(vec![0.0]).unwrap())]).unwrap();
                ClientWorkItem::new(ClientId::new(format!("c{k}")), std::iter::repeat_n(b, 2), Rng::new(0))
            })
            .collect();
        let (_, t) = for_each_client_timed(&spec, &leaf(0.0), items, Backend::Sequential).unwrap();
        assert!(t.client_sum().as_secs_f64() >= 0.9 * t.total.as_secs_f64());
    }

    #[test]
    fn backend_parsing() {
        assert_eq!("sequential".parse::<Backend>().unwrap(), Backend::Sequential);
        assert_eq!("parallel:8".parse::<Backend>().unwrap(), Backend::Parallel(8));
        assert!("parallel:0".parse::<Backend>().is_err());
        assert!("parallel".parse::<Backend>().is_err());
        assert_eq!(Backend::Parallel(3).to_string(), "parallel:3");
    }
}
