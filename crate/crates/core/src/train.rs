//! Training loop, evaluation, and the stabilizer retry protocol.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::ConfigMap;
use crate::data::{dequantize, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::model::{bits_per_dim, FlowModel, ModelConfig, MODEL_KEYS};
use crate::optim::{clip_global_norm, OptimConfig, OptimKind, Optimizer};
use crate::params::{Ctx, ParamStore};
use crate::rng::FlowRng;
use crate::DenseArray;

pub const RUN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "clip",
    "halving",
    "max_retries",
    "ceiling",
    "checkpoint_every",
    "deterministic",
    "inject_divergence_epoch",
    "inject_divergence_times",
];

pub const METRICS_COLUMNS: &str = "epoch,step,nll_nats,bpd,grad_norm,retries,u,wall_ms";

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient norm cap; `0` disables clipping.
    pub clip: f64,
    /// Divisor applied to the stabilizer multipliers on each retry.
    pub halving: f64,
    pub max_retries: usize,
    /// Per-dimension NLL in nats above which a batch counts as diverged.
    pub ceiling: f64,
    /// Write a checkpoint every this many epochs; `0` writes only the last.
    pub checkpoint_every: usize,
    /// Record `wall_ms` as 0 so metrics files are byte-reproducible.
    pub deterministic: bool,
    /// Test hook: poison the first batch of this epoch.
    pub inject_divergence_epoch: Option<usize>,
    pub inject_divergence_times: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            epochs: 30,
            batch_size: 64,
            seed: 0,
            clip: 50.0,
            halving: 2.0,
            max_retries: 5,
            ceiling: 20.0,
            checkpoint_every: 0,
            deterministic: false,
            inject_divergence_epoch: None,
            inject_divergence_times: 1,
        }
    }
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let known: Vec<&str> = MODEL_KEYS.iter().chain(RUN_KEYS).copied().collect();
        map.check_known(&known)?;
        let d = Self::default();
        let optim = OptimConfig {
            kind: map.parse_or::<OptimKind>("optimizer", d.optim.kind)?,
            lr: map.parse_or("lr", d.optim.lr)?,
            beta1: map.parse_or("beta1", d.optim.beta1)?,
            beta2: map.parse_or("beta2", d.optim.beta2)?,
            eps: map.parse_or("adam_eps", d.optim.eps)?,
        };
        let inject = match map.get("inject_divergence_epoch") {
            None | Some("none") => None,
            Some(_) => Some(map.parse_or("inject_divergence_epoch", 0usize)?),
        };
        let run = Self {
            model: ModelConfig::from_map(map)?,
            optim,
            epochs: map.parse_or("epochs", d.epochs)?,
            batch_size: map.parse_or("batch_size", d.batch_size)?,
            seed: map.parse_or("seed", d.seed)?,
            clip: map.parse_or("clip", d.clip)?,
            halving: map.parse_or("halving", d.halving)?,
            max_retries: map.parse_or("max_retries", d.max_retries)?,
            ceiling: map.parse_or("ceiling", d.ceiling)?,
            checkpoint_every: map.parse_or("checkpoint_every", d.checkpoint_every)?,
            deterministic: map.parse_or("deterministic", d.deterministic)?,
            inject_divergence_epoch: inject,
            inject_divergence_times: map.parse_or("inject_divergence_times", d.inject_divergence_times)?,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = self.model.to_map();
        m.set("epochs", self.epochs);
        m.set("batch_size", self.batch_size);
        m.set("lr", self.optim.lr);
        m.set("optimizer", self.optim.kind);
        m.set("beta1", self.optim.beta1);
        m.set("beta2", self.optim.beta2);
        m.set("adam_eps", self.optim.eps);
        m.set("seed", self.seed);
        m.set("clip", self.clip);
        m.set("halving", self.halving);
        m.set("max_retries", self.max_retries);
        m.set("ceiling", self.ceiling);
        m.set("checkpoint_every", self.checkpoint_every);
        m.set("deterministic", self.deterministic);
        match self.inject_divergence_epoch {
            Some(e) => m.set("inject_divergence_epoch", e),
            None => m.set("inject_divergence_epoch", "none"),
        }
        m.set("inject_divergence_times", self.inject_divergence_times);
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.optim.lr)));
        }
        if !(self.halving > 1.0) {
            return Err(Error::Config(format!("halving must exceed 1, got {}", self.halving)));
        }
        Ok(())
    }

    /// Stabilizer multiplier after `retries` retries.
    pub fn u_after(&self, retries: usize) -> f64 {
        self.model.u_init / self.halving.powi(retries as i32)
    }
}

/// Model, parameters, optimizer state and data standardization: everything
/// a checkpoint holds.
pub struct Session {
    pub run: RunConfig,
    pub model: FlowModel,
    pub params: ParamStore,
    pub optim: Optimizer,
    /// Applied to 2-D points before the flow; `None` for images.
    pub standardizer: Option<Standardizer>,
    pub epoch: usize,
    pub retries: usize,
}

impl Session {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let mut params = ParamStore::new();
        let model = FlowModel::new(run.model.clone(), &mut params, run.seed)?;
        let optim = Optimizer::new(run.optim, &params);
        Ok(Self {
            run,
            model,
            params,
            optim,
            standardizer: None,
            epoch: 0,
            retries: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.run.to_map());
        ck.push("train.epoch", DenseArray::scalar(self.epoch as f64));
        ck.push("train.retries", DenseArray::scalar(self.retries as f64));
        if let Some(s) = &self.standardizer {
            ck.push("data.shift", DenseArray::from_vec(s.shift.clone()));
            ck.push("data.scale", DenseArray::from_vec(s.scale.clone()));
        }
        for id in self.params.ids() {
            ck.push(format!("param/{}", self.params.name(id)), self.params.get(id).clone());
        }
        for (name, v) in self.optim.export(&self.params) {
            ck.push(name, v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let run = RunConfig::from_map(&ck.config)?;
        let mut s = Self::new(run)?;
        let count = |name: &str| -> Result<usize> {
            let v = ck
                .get(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks `{name}`")))?
                .item();
            Ok(v as usize)
        };
        s.epoch = count("train.epoch")?;
        s.retries = count("train.retries")?;
        s.standardizer = match (ck.get("data.shift"), ck.get("data.scale")) {
            (Some(a), Some(b)) => Some(Standardizer {
                shift: a.data().to_vec(),
                scale: b.data().to_vec(),
            }),
            _ => None,
        };
        let ids: Vec<_> = s.params.ids().collect();
        for id in ids {
            let name = format!("param/{}", s.params.name(id));
            let v = ck
                .get(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks `{name}`")))?;
            s.params
                .set(id, v.clone())
                .map_err(|e| Error::ConfigMismatch(format!("{name}: {e}")))?;
        }
        s.optim.import(&s.params, |n| ck.get(n).cloned())?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Model input for a batch of raw rows: dequantized images or
    /// standardized points.
    fn prepare(&self, x: &DenseArray, levels: Option<u32>, rng: &mut FlowRng) -> Result<DenseArray> {
        match (levels, &self.standardizer) {
            (Some(lv), _) => dequantize(x, lv, rng),
            (None, Some(s)) => Ok(s.apply(x)),
            (None, None) => Ok(x.clone()),
        }
    }

    /// `log |det|` of the standardization per sample.
    fn standardizer_logdet(&self) -> f64 {
        self.standardizer
            .as_ref()
            .map_or(0.0, |s| s.scale.iter().map(|v| v.abs().ln()).sum())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.item_shape() != self.run.model.input {
            return Err(Error::ConfigMismatch(format!(
                "data items are {:?} but the model expects {:?}",
                data.item_shape(),
                self.run.model.input
            )));
        }
        Ok(())
    }
}

/// Compares the model section of a checkpoint config against `expected` and
/// lists every key that differs.
pub fn check_model_config(ck: &Checkpoint, expected: &ModelConfig) -> Result<()> {
    let have = ModelConfig::from_map(&ck.config)?.to_map();
    let want = expected.to_map();
    let diffs: Vec<String> = MODEL_KEYS
        .iter()
        .filter(|k| have.get(k) != want.get(k))
        .map(|k| {
            format!(
                "{k}: checkpoint has {}, config has {}",
                have.get(k).unwrap_or("-"),
                want.get(k).unwrap_or("-")
            )
        })
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(diffs.join("; ")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub count: usize,
    /// Mean per-sample negative log-likelihood in nats.
    pub nll_mean: f64,
    pub nll_std: f64,
    /// Bits per dimension for image data.
    pub bpd: Option<f64>,
}

impl EvalStats {
    pub fn nll_per_dim(&self, dims: usize) -> f64 {
        self.nll_mean / dims as f64
    }
}

/// Held-out likelihood with a dequantization stream fixed by `seed`, so
/// repeated evaluations of the same parameters agree exactly.
pub fn evaluate(session: &Session, data: &Dataset, seed: u64) -> Result<EvalStats> {
    session.check_data(data)?;
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut rng = FlowRng::derive(seed, "eval");
    let offset = session.standardizer_logdet();
    let mut nll = Vec::with_capacity(data.len());
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let x = session.prepare(&data.x.select_rows(chunk), data.levels, &mut rng)?;
        let lp = session.model.log_prob_array(&session.params, &x)?;
        nll.extend(lp.data().iter().map(|v| -(v + offset)));
    }
    let n = nll.len() as f64;
    let mean = nll.iter().sum::<f64>() / n;
    let var = nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let dims = session.model.dims();
    Ok(EvalStats {
        count: nll.len(),
        nll_mean: mean,
        nll_std: var.sqrt(),
        bpd: data.levels.map(|lv| bits_per_dim(-mean, dims, lv)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub nll_nats: f64,
    pub bpd: Option<f64>,
    pub grad_norm: f64,
    pub retries: usize,
    pub u: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let bpd = self.bpd.map(|b| b.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.nll_nats, bpd, self.grad_norm, self.retries, self.u, self.wall_ms
        )
    }
}

/// Writes the config echo, then the header, then flushes each row as it
/// arrives.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, config: &ConfigMap) -> Result<Self> {
        for line in config.render().lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{METRICS_COLUMNS}")?;
        Ok(Self { out })
    }

    pub fn row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Where checkpoints go during training.
pub struct CheckpointPlan<'a> {
    pub path: &'a Path,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub initial: EvalStats,
    pub last: EvalStats,
    pub retries: usize,
}

enum EpochOutcome {
    Done { grad_norm: f64 },
    Diverged(String),
}

/// Trains `session` on `train` from its current epoch to `run.epochs`,
/// logging held-out metrics on `eval` after every epoch.
///
/// A fresh session (epoch 0) first fits the point standardization, runs the
/// actnorm data initialization on the first batch, and logs an epoch-0 row.
/// When an epoch diverges, the parameters and optimizer state from the start
/// of the epoch are restored, every stabilizer multiplier is reset to
/// `u_init / halvingʳ` for the `r`-th retry, and the epoch restarts.
pub fn train<W: Write>(
    session: &mut Session,
    train: &Dataset,
    eval: &Dataset,
    metrics: &mut MetricsWriter<W>,
    checkpoint: Option<CheckpointPlan<'_>>,
) -> Result<TrainReport> {
    session.check_data(train)?;
    session.check_data(eval)?;
    if train.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let run = session.run.clone();
    let eval_seed = run.seed;
    let mut rows = Vec::new();

    if session.epoch == 0 {
        if !train.is_image() && session.standardizer.is_none() {
            session.standardizer = Some(Standardizer::fit(&train.x));
        }
        let order = FlowRng::derive(run.seed, "shuffle.1").permutation(train.len());
        let first: Vec<usize> = order.iter().copied().take(run.batch_size).collect();
        let mut rng = FlowRng::derive(run.seed, "dequant.init");
        let x = session.prepare(&train.x.select_rows(&first), train.levels, &mut rng)?;
        session.model.initialize(&mut session.params, &x)?;
    }
    let initial = evaluate(session, eval, eval_seed)?;
    let mut last = initial.clone();
    if session.epoch == 0 {
        let row = MetricsRow {
            epoch: 0,
            step: session.optim.step_count(),
            nll_nats: initial.nll_mean,
            bpd: initial.bpd,
            grad_norm: 0.0,
            retries: session.retries,
            u: run.u_after(session.retries),
            wall_ms: 0,
        };
        metrics.row(&row)?;
        rows.push(row);
    }

    let mut injected = 0;
    while session.epoch < run.epochs {
        let epoch = session.epoch + 1;
        let snapshot = (session.params.clone(), session.optim.clone());
        let started = Instant::now();
        let poison = run.inject_divergence_epoch == Some(epoch) && injected < run.inject_divergence_times;
        let outcome = match run_epoch(session, train, epoch, poison)? {
            EpochOutcome::Done { grad_norm } => match evaluate(session, eval, eval_seed) {
                Ok(stats) if stats.nll_per_dim(session.model.dims()) <= run.ceiling => {
                    last = stats;
                    Ok(grad_norm)
                }
                Ok(stats) => Err(format!(
                    "held-out NLL {} nats/dim above ceiling",
                    stats.nll_per_dim(session.model.dims())
                )),
                Err(Error::NonFinite { op }) => Err(format!("non-finite value in {op}")),
                Err(e) if matches!(e, Error::Singular { .. } | Error::OutsideValidity { .. }) => Err(e.to_string()),
                Err(e) => return Err(e),
            },
            EpochOutcome::Diverged(why) => Err(why),
        };
        if poison {
            injected += 1;
        }
        match outcome {
            Ok(grad_norm) => {
                session.epoch = epoch;
                let wall_ms = if run.deterministic {
                    0
                } else {
                    started.elapsed().as_millis() as u64
                };
                let row = MetricsRow {
                    epoch,
                    step: session.optim.step_count(),
                    nll_nats: last.nll_mean,
                    bpd: last.bpd,
                    grad_norm,
                    retries: session.retries,
                    u: run.u_after(session.retries),
                    wall_ms,
                };
                metrics.row(&row)?;
                rows.push(row);
                if let Some(plan) = &checkpoint {
                    let due = run.checkpoint_every > 0 && epoch.is_multiple_of(run.checkpoint_every);
                    if due || epoch == run.epochs {
                        session.save(plan.path)?;
                    }
                }
            }
            Err(why) => {
                session.params = snapshot.0;
                session.optim = snapshot.1;
                if session.retries >= run.max_retries {
                    log::error!("epoch {epoch} diverged ({why}); retries exhausted");
                    if let Some(plan) = &checkpoint {
                        session.save(plan.path)?;
                    }
                    return Err(Error::RetriesExhausted {
                        retries: session.retries,
                    });
                }
                session.retries += 1;
                let u = run.u_after(session.retries);
                log::warn!("epoch {epoch} diverged ({why}); retry {} with u = {u}", session.retries);
                session.model.set_stabilizer_u(&mut session.params, u);
            }
        }
    }
    Ok(TrainReport {
        rows,
        initial,
        last,
        retries: session.retries,
    })
}

fn run_epoch(session: &mut Session, train: &Dataset, epoch: usize, poison: bool) -> Result<EpochOutcome> {
    let run = session.run.clone();
    let order = FlowRng::derive(run.seed, &format!("shuffle.{epoch}")).permutation(train.len());
    let mut rng = FlowRng::derive(run.seed, &format!("dequant.{epoch}.{}", session.retries));
    let dims = session.model.dims() as f64;
    let mut norm_sum = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(run.batch_size).enumerate() {
        let x = session.prepare(&train.x.select_rows(chunk), train.levels, &mut rng)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &session.params);
        let loss = match session.model.log_prob(&ctx, tape.constant(x)) {
            Ok(lp) => lp.mean_all().scale(-1.0),
            Err(e @ (Error::Singular { .. } | Error::OutsideValidity { .. } | Error::NonFinite { .. })) => {
                return Ok(EpochOutcome::Diverged(e.to_string()));
            }
            Err(e) => return Err(e),
        };
        let value = if poison && b == 0 {
            f64::INFINITY
        } else {
            loss.value().item()
        };
        if !value.is_finite() || value / dims > run.ceiling {
            return Ok(EpochOutcome::Diverged(format!("batch {b} loss {value}")));
        }
        let grads = tape.backward(loss, &DenseArray::scalar(1.0))?;
        let mut grads = ctx.gradients(&grads);
        let norm = clip_global_norm(&mut grads, run.clip);
        match session.optim.step(&mut session.params, &grads) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => return Ok(EpochOutcome::Diverged(format!("batch {b} gradient"))),
            Err(e) => return Err(e),
        }
        session.model.post_update(&mut session.params);
        if !session.params.all_finite() {
            return Ok(EpochOutcome::Diverged(format!("batch {b} parameters")));
        }
        norm_sum += norm;
        batches += 1;
    }
    Ok(EpochOutcome::Done {
        grad_norm: norm_sum / batches as f64,
    })
}
