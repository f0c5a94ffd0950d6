//! Bulk-synchronous parameter server.
//!
//! Every iteration each worker computes a mini-batch gradient on its own
//! parameter snapshot, filters it and pushes the surviving coordinates. The
//! server waits for one push from every worker, sums them in worker-id order,
//! takes an averaged SGD step and answers with the new values of every
//! coordinate that any worker touched. Workers patch their snapshots with that
//! response before starting the next iteration.
//!
//! The loop runs either with one thread per worker exchanging messages with
//! the server ([`Execution::Threaded`]) or fully in the calling thread
//! ([`Execution::Sequential`]); both produce bit-identical results.

use std::fmt::Write as _;
use std::sync::{mpsc, Arc};
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agemodel::{self, init_model, ModelSpec, ParameterVector, Sample};
use crate::error::{check_len, Error, Result};
use crate::netmodel::{dense_bytes, sparse_bytes, BYTES_PER_VALUE};
use crate::update_filters::{FilterKind, FilterState, SparseUpdate};

/// Server update rule, recorded in every log header.
pub const UPDATE_RULE: &str =
    "W <- W - lr * (sum_i U_i) / n_workers (server-side averaged-gradient SGD)";

fn default_delta() -> f64 {
    1e-5
}
fn default_lr() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    16
}
fn default_eval_every() -> u64 {
    50
}
fn default_filter() -> FilterKind {
    FilterKind::Asu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    pub n_workers: usize,
    #[serde(default = "default_filter")]
    pub filter: FilterKind,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_iterations: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.n_workers == 0 {
            return Err(Error::Argument("n_workers must be >= 1".into()));
        }
        if u32::try_from(self.n_workers).is_err() {
            return Err(Error::Argument(
                "n_workers does not fit a 32-bit worker id".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::Argument("max_iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Argument("eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Argument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Argument(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// The slice of the training set owned by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub worker_id: u32,
    pub samples: Vec<Sample>,
}

/// Seeded shuffle followed by round-robin assignment to `n` shards.
pub fn partition(dataset: &[Sample], n: usize, seed: u64) -> Result<Vec<Shard>> {
    if n == 0 {
        return Err(Error::Argument("cannot partition into 0 shards".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Argument("cannot partition an empty dataset".into()));
    }
    if n > dataset.len() {
        return Err(Error::Argument(format!(
            "{n} workers but only {} samples; some shards would be empty",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut shards: Vec<Shard> = (0..n)
        .map(|i| Shard {
            worker_id: i as u32,
            samples: Vec::with_capacity(dataset.len() / n + 1),
        })
        .collect();
    for (k, idx) in order.into_iter().enumerate() {
        shards[k % n].samples.push(dataset[idx].clone());
    }
    Ok(shards)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushMessage {
    pub worker_id: u32,
    pub iteration: u64,
    pub update: SparseUpdate,
    pub train_loss: f64,
}

/// New values of every coordinate touched in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PullResponse {
    pub iteration: u64,
    pub values: SparseUpdate,
}

/// Bytes a push of `update` costs under `kind`'s encoding.
pub fn push_bytes(kind: FilterKind, update: &SparseUpdate) -> u64 {
    match kind {
        FilterKind::Raw => dense_bytes(update.total_dims() as u64, BYTES_PER_VALUE),
        _ => sparse_bytes(update.len() as u64),
    }
}

/// Bytes a pull of `response` costs under `kind`'s encoding.
pub fn pull_bytes(kind: FilterKind, response: &PullResponse) -> u64 {
    match kind {
        FilterKind::Raw => dense_bytes(response.values.total_dims() as u64, BYTES_PER_VALUE),
        _ => sparse_bytes(response.values.len() as u64),
    }
}

#[derive(Debug, Clone)]
pub struct Worker {
    shard: Shard,
    cursor: usize,
    snapshot: ParameterVector,
    filter: FilterState,
}

impl Worker {
    pub fn new(shard: Shard, snapshot: ParameterVector, filter: FilterState) -> Result<Self> {
        if shard.samples.is_empty() {
            return Err(Error::Argument(format!(
                "worker {} has an empty shard",
                shard.worker_id
            )));
        }
        check_len(filter.residual().len(), snapshot.len())?;
        Ok(Self {
            shard,
            cursor: 0,
            snapshot,
            filter,
        })
    }

    pub fn id(&self) -> u32 {
        self.shard.worker_id
    }

    pub fn snapshot(&self) -> &ParameterVector {
        &self.snapshot
    }

    pub fn filter(&self) -> &FilterState {
        &self.filter
    }

    /// Next `batch_size` samples of the shard, wrapping around at the end.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<Sample> {
        let len = self.shard.samples.len();
        let batch = (0..batch_size)
            .map(|k| self.shard.samples[(self.cursor + k) % len].clone())
            .collect();
        self.cursor = (self.cursor + batch_size) % len;
        batch
    }

    /// One worker iteration: gradient on the next batch, then the push filter.
    pub fn step(
        &mut self,
        iteration: u64,
        spec: &ModelSpec,
        batch_size: usize,
    ) -> Result<PushMessage> {
        let batch = self.next_batch(batch_size);
        let (train_loss, grad) = agemodel::batch_loss_and_gradient(&self.snapshot, spec, &batch)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                what: format!("worker {} training loss is {train_loss}", self.id()),
            });
        }
        let update = self.filter.push(&grad)?;
        Ok(PushMessage {
            worker_id: self.id(),
            iteration,
            update,
            train_loss,
        })
    }

    pub fn apply_pull(&mut self, pull: &PullResponse) -> Result<()> {
        check_len(self.snapshot.len(), pull.values.total_dims())?;
        let params = self.snapshot.as_mut_slice();
        for &(i, v) in pull.values.entries() {
            params[i as usize] = v;
        }
        Ok(())
    }
}

/// Aggregates one push per worker and applies the SGD step to `params`.
///
/// The pull lists every coordinate present in any push, even where the
/// contributions cancel.
pub fn server_step(
    params: &mut ParameterVector,
    pushes: &[PushMessage],
    iteration: u64,
    lr: f64,
    n_workers: usize,
) -> Result<PullResponse> {
    if pushes.len() != n_workers {
        return Err(Error::Protocol(format!(
            "iteration {iteration}: expected {n_workers} pushes, got {}",
            pushes.len()
        )));
    }
    let mut ordered: Vec<&PushMessage> = pushes.iter().collect();
    ordered.sort_by_key(|p| p.worker_id);
    for (expected, push) in ordered.iter().enumerate() {
        if push.worker_id as usize != expected {
            return Err(Error::Protocol(format!(
                "iteration {iteration}: missing or duplicate push from worker {expected}"
            )));
        }
        if push.iteration != iteration {
            return Err(Error::Protocol(format!(
                "worker {} pushed iteration {} during iteration {iteration}",
                push.worker_id, push.iteration
            )));
        }
        check_len(params.len(), push.update.total_dims())?;
    }

    let mut aggregate = vec![0.0; params.len()];
    let mut touched = vec![false; params.len()];
    for push in &ordered {
        push.update.add_into(&mut aggregate);
        for &(i, _) in push.update.entries() {
            touched[i as usize] = true;
        }
    }
    agemodel::apply_update_in_place(params, &aggregate, lr, n_workers)?;

    let mut entries = Vec::new();
    for (i, &t) in touched.iter().enumerate() {
        if t {
            let v = params[i];
            if !v.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    what: format!("parameter {i} became {v}"),
                });
            }
            entries.push((i as u32, v));
        }
    }
    Ok(PullResponse {
        iteration,
        values: SparseUpdate::new(entries, params.len())?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub worker_id: u32,
    pub train_loss: f64,
    pub drop_fraction: f64,
    pub push_bytes: u64,
    pub pull_bytes: u64,
    pub test_loss: Option<f64>,
}

/// One row per worker per iteration, ordered by iteration then worker id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str =
    "iteration,worker_id,train_loss,drop_fraction,push_bytes,pull_bytes,test_loss";

impl TrainingLog {
    pub fn iterations(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.iteration)
    }

    /// Rows of one iteration.
    pub fn iteration_rows(&self, iteration: u64) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.iteration == iteration)
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.test_loss)
    }

    /// Mean drop fraction over every push in the log.
    pub fn mean_drop_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.drop_fraction).sum::<f64>() / self.rows.len() as f64
    }

    /// CSV text: `comments` become `# ` lines above the column header.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            for line in c.lines() {
                let _ = writeln!(s, "# {line}");
            }
        }
        let _ = writeln!(s, "{LOG_HEADER}");
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{},{},",
                r.iteration, r.worker_id, r.train_loss, r.drop_fraction, r.push_bytes, r.pull_bytes
            );
            if let Some(t) = r.test_loss {
                let _ = write!(s, "{t}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the CSV produced by [`TrainingLog::to_csv`]; `#` lines are ignored.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::parse(None, e.to_string()))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != LOG_HEADER {
            return Err(Error::parse(
                None,
                format!("unexpected log header {header:?}"),
            ));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                Error::parse(e.position().map(|p| p.line() as usize), e.to_string())
            })?;
            let line = record.position().map(|p| p.line() as usize);
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let num = |i: usize, name: &str| -> Result<f64> {
                let v: f64 = field(i)
                    .parse()
                    .map_err(|_| Error::parse(line, format!("bad {name} {:?}", field(i))))?;
                Ok(v)
            };
            let int = |i: usize, name: &str| -> Result<u64> {
                field(i)
                    .parse()
                    .map_err(|_| Error::parse(line, format!("bad {name} {:?}", field(i))))
            };
            let worker_id = u32::try_from(int(1, "worker_id")?)
                .map_err(|_| Error::parse(line, "worker_id out of range"))?;
            let test_loss = match field(6) {
                "" => None,
                _ => Some(num(6, "test_loss")?),
            };
            let row = LogRow {
                iteration: int(0, "iteration")?,
                worker_id,
                train_loss: num(2, "train_loss")?,
                drop_fraction: num(3, "drop_fraction")?,
                push_bytes: int(4, "push_bytes")?,
                pull_bytes: int(5, "pull_bytes")?,
                test_loss,
            };
            if rows
                .last()
                .is_some_and(|prev: &LogRow| prev.iteration > row.iteration)
            {
                return Err(Error::parse(line, "iteration numbers must not decrease"));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// One thread per worker, message passing with the server.
    #[default]
    Threaded,
    /// Everything in the calling thread, workers stepped in id order.
    Sequential,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterVector,
    pub log: TrainingLog,
}

struct ServerState<'a, F> {
    config: &'a TrainConfig,
    test_set: &'a [Sample],
    params: ParameterVector,
    log: TrainingLog,
    observer: F,
}

impl<F: FnMut(u64, &ParameterVector)> ServerState<'_, F> {
    fn iterate(&mut self, iteration: u64, pushes: &[PushMessage]) -> Result<PullResponse> {
        let cfg = self.config;
        let pull = server_step(&mut self.params, pushes, iteration, cfg.lr, cfg.n_workers)?;
        (self.observer)(iteration, &self.params);

        let test_loss = if (iteration.is_multiple_of(cfg.eval_every)
            || iteration == cfg.max_iterations)
            && !self.test_set.is_empty()
        {
            let loss = agemodel::mean_loss(&self.params, &cfg.spec, self.test_set)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    what: format!("test loss is {loss}"),
                });
            }
            Some(loss)
        } else {
            None
        };

        let pull_cost = pull_bytes(cfg.filter, &pull);
        let mut ordered: Vec<&PushMessage> = pushes.iter().collect();
        ordered.sort_by_key(|p| p.worker_id);
        for push in ordered {
            self.log.rows.push(LogRow {
                iteration,
                worker_id: push.worker_id,
                train_loss: push.train_loss,
                drop_fraction: push.update.drop_fraction()?,
                push_bytes: push_bytes(cfg.filter, &push.update),
                pull_bytes: pull_cost,
                test_loss,
            });
        }
        Ok(pull)
    }
}

/// Runs the full training loop.
pub fn train(
    config: &TrainConfig,
    dataset: &[Sample],
    test_set: &[Sample],
    mode: Execution,
) -> Result<TrainOutcome> {
    train_observed(config, dataset, test_set, mode, |_, _| {})
}

/// Like [`train`], calling `observer` with the server parameters after every iteration.
pub fn train_observed<F>(
    config: &TrainConfig,
    dataset: &[Sample],
    test_set: &[Sample],
    mode: Execution,
    observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(u64, &ParameterVector),
{
    config.validate()?;
    let params = init_model(&config.spec)?;
    let shards = partition(dataset, config.n_workers, config.seed)?;
    let workers = shards
        .into_iter()
        .map(|shard| {
            let filter = FilterState::new(config.filter, config.delta, params.len())?;
            Worker::new(shard, params.clone(), filter)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState {
        config,
        test_set,
        params,
        log: TrainingLog::default(),
        observer,
    };
    match mode {
        Execution::Sequential => run_sequential(&mut server, workers)?,
        Execution::Threaded => run_threaded(&mut server, workers)?,
    }
    Ok(TrainOutcome {
        params: server.params,
        log: server.log,
    })
}

fn run_sequential<F: FnMut(u64, &ParameterVector)>(
    server: &mut ServerState<'_, F>,
    mut workers: Vec<Worker>,
) -> Result<()> {
    let cfg = server.config;
    for iteration in 1..=cfg.max_iterations {
        let pushes = workers
            .iter_mut()
            .map(|w| w.step(iteration, &cfg.spec, cfg.batch_size))
            .collect::<Result<Vec<_>>>()?;
        let pull = server.iterate(iteration, &pushes)?;
        for w in &mut workers {
            w.apply_pull(&pull)?;
        }
    }
    Ok(())
}

fn run_threaded<F: FnMut(u64, &ParameterVector)>(
    server: &mut ServerState<'_, F>,
    workers: Vec<Worker>,
) -> Result<()> {
    let cfg = server.config;
    let n = workers.len();
    thread::scope(|scope| {
        let (push_tx, push_rx) = mpsc::channel::<Result<PushMessage>>();
        let mut pull_txs = Vec::with_capacity(n);
        for mut worker in workers {
            let (pull_tx, pull_rx) = mpsc::channel::<Arc<PullResponse>>();
            pull_txs.push(pull_tx);
            let push_tx = push_tx.clone();
            let spec = &cfg.spec;
            scope.spawn(move || {
                for iteration in 1..=cfg.max_iterations {
                    let msg = worker.step(iteration, spec, cfg.batch_size);
                    let failed = msg.is_err();
                    if push_tx.send(msg).is_err() || failed {
                        return;
                    }
                    // A closed channel means the server stopped early.
                    let Ok(pull) = pull_rx.recv() else { return };
                    if let Err(e) = worker.apply_pull(&pull) {
                        let _ = push_tx.send(Err(e));
                        return;
                    }
                }
            });
        }
        drop(push_tx);

        for iteration in 1..=cfg.max_iterations {
            let mut pushes = Vec::with_capacity(n);
            while pushes.len() < n {
                let msg = push_rx.recv().map_err(|_| {
                    Error::Protocol(format!("a worker exited before iteration {iteration}"))
                })?;
                pushes.push(msg?);
            }
            let pull = Arc::new(server.iterate(iteration, &pushes)?);
            for tx in &pull_txs {
                tx.send(Arc::clone(&pull)).map_err(|_| {
                    Error::Protocol("a worker hung up before receiving its pull".into())
                })?;
            }
        }
        Ok(())
    })
}
