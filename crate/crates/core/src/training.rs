//! Maximum-likelihood training of the attention model.
//!
//! The likelihood window of a sequence is `(t_1, T]`: the first event only
//! seeds the history. Event terms are exact; the compensator on each
//! inter-event interval is a stratified Monte Carlo estimate. Gradients hold
//! the sample locations fixed.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Tensor};
use crate::data::{Dataset, Sequence, Split};
use crate::error::{Error, Result};
use crate::intensity::{IntensityModel, IntervalIntensity};
use crate::model::{Forward, SahpModel, SequenceStates};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_delta: f64,
    pub patience: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_steps: 500,
            batch_size: 16,
            max_epochs: 100,
            early_stop_delta: 1e-3,
            patience: 5,
            mc_samples: 10,
            seed: 0,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        if !(self.early_stop_delta >= 0.0) {
            return Err(Error::invalid("early_stop_delta must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }

    /// Learning rate used at optimizer step `step` (1-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Monte Carlo locations as fractions of each interval's length, `n` per
/// interval, one uniform draw in each of `n` equal strata.
#[derive(Debug, Clone, PartialEq)]
pub struct McSamples {
    per_interval: usize,
    fractions: Vec<f64>,
}

impl McSamples {
    pub fn stratified(intervals: usize, n: usize, rng: &mut rng::Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("need at least one Monte Carlo sample per interval"));
        }
        let fractions = (0..intervals * n)
            .map(|k| ((k % n) as f64 + rng.gen::<f64>()) / n as f64)
            .collect();
        Ok(Self {
            per_interval: n,
            fractions,
        })
    }

    pub fn per_interval(&self) -> usize {
        self.per_interval
    }

    pub fn interval(&self, i: usize) -> &[f64] {
        &self.fractions[i * self.per_interval..(i + 1) * self.per_interval]
    }
}

/// Negative log-likelihood of one sequence and the number of events whose
/// log-intensity entered it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceNll {
    pub nll: f64,
    pub counted_events: usize,
}

fn interval_end(seq: &Sequence, i: usize) -> f64 {
    seq.events.get(i + 1).map_or(seq.horizon, |e| e.time)
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(format!("{what} is not finite ({value})")))
    }
}

fn compensator_over<I: IntervalIntensity>(intervals: &[I], seq: &Sequence, samples: &McSamples) -> f64 {
    let mut total = 0.0;
    for (i, iv) in intervals.iter().enumerate() {
        let start = seq.events[i].time;
        let len = interval_end(seq, i) - start;
        let mut acc = 0.0;
        for f in samples.interval(i) {
            acc += iv.total(start + len * f);
        }
        total += len * acc / samples.per_interval() as f64;
    }
    total
}

/// Compensator over `(t_1, T]` estimated with `n` stratified samples per interval.
pub fn mc_compensator<M: IntensityModel>(
    model: &M,
    seq: &Sequence,
    n: usize,
    rng: &mut rng::Rng,
) -> Result<f64> {
    let samples = McSamples::stratified(seq.len(), n, rng)?;
    let intervals = model.intervals(&seq.events)?;
    check_finite(compensator_over(&intervals, seq, &samples), "compensator")
}

/// NLL on `(t_1, T]` at fixed sample locations.
pub fn sequence_nll_with<M: IntensityModel>(
    model: &M,
    seq: &Sequence,
    samples: &McSamples,
) -> Result<SequenceNll> {
    if seq.is_empty() {
        return Ok(SequenceNll {
            nll: 0.0,
            counted_events: 0,
        });
    }
    let intervals = model.intervals(&seq.events)?;
    let mut nll = compensator_over(&intervals, seq, samples);
    for (iv, next) in intervals.iter().zip(seq.events.iter().skip(1)) {
        nll -= iv.intensity(next.type_id, next.time).ln();
    }
    Ok(SequenceNll {
        nll: check_finite(nll, "sequence NLL")?,
        counted_events: seq.len() - 1,
    })
}

pub fn sequence_nll<M: IntensityModel>(
    model: &M,
    seq: &Sequence,
    n_samples: usize,
    rng: &mut rng::Rng,
) -> Result<SequenceNll> {
    let samples = McSamples::stratified(seq.len(), n_samples, rng)?;
    sequence_nll_with(model, seq, &samples)
}

/// Per-event NLL over a set of sequences, sample stream `k` drawn from
/// `(seed, stream, k)`. Reduction order is the order of `sequences`.
pub fn nll_per_event<M: IntensityModel>(
    model: &M,
    sequences: &[&Sequence],
    n_samples: usize,
    seed: u64,
    stream: &str,
) -> Result<f64> {
    let parts = sequences
        .par_iter()
        .enumerate()
        .map(|(k, seq)| {
            let mut r = rng::indexed_rng(seed, stream, k as u64);
            sequence_nll(model, seq, n_samples, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let (nll, events) = parts
        .iter()
        .fold((0.0, 0usize), |(a, n), p| (a + p.nll, n + p.counted_events));
    if events == 0 {
        return Err(Error::invalid("no events to score: every sequence has fewer than 2 events"));
    }
    Ok(nll / events as f64)
}

/// Adds `dx · ∂x/∂(mu, eta, gamma)` for `x = mu + (eta - mu)·e`, `e = exp(-gamma·d)`.
#[inline]
fn push_adjoint(grads: &mut [Vec<f64>; 3], idx: usize, dx: f64, mu: f64, eta: f64, e: f64, d: f64) {
    grads[0][idx] += dx * (1.0 - e);
    grads[1][idx] += dx * e;
    grads[2][idx] += dx * (-(eta - mu) * d * e);
}

/// NLL from precomputed intensity states, plus adjoints wrt every state's
/// `(mu, eta, gamma)`, laid out `i·U + u`.
pub fn states_nll(states: &SequenceStates, seq: &Sequence, samples: &McSamples) -> Result<(f64, [Vec<f64>; 3])> {
    let u_count = states.first().map_or(0, |s| s.len());
    let size = states.len() * u_count;
    let mut grads = [vec![0.0; size], vec![0.0; size], vec![0.0; size]];
    let mut nll = 0.0;
    let m = samples.per_interval() as f64;
    for (i, row) in states.iter().enumerate() {
        let start = seq.events[i].time;
        let len = interval_end(seq, i) - start;
        if let Some(next) = seq.events.get(i + 1) {
            let s = &row[next.type_id];
            let d = next.time - s.interval_start;
            let e = (-s.gamma * d).exp();
            let x = s.mu + (s.eta - s.mu) * e;
            let sp = softplus(x);
            nll -= (s.scale * sp).ln();
            push_adjoint(&mut grads, i * u_count + next.type_id, -sigmoid(x) / sp, s.mu, s.eta, e, d);
        }
        let w = len / m;
        let mut acc = 0.0;
        for f in samples.interval(i) {
            let tau = start + len * f;
            let mut total = 0.0;
            for (u, s) in row.iter().enumerate() {
                let d = tau - s.interval_start;
                let e = (-s.gamma * d).exp();
                let x = s.mu + (s.eta - s.mu) * e;
                total += s.scale * softplus(x);
                push_adjoint(&mut grads, i * u_count + u, w * s.scale * sigmoid(x), s.mu, s.eta, e, d);
            }
            acc += total;
        }
        nll += len * acc / m;
    }
    Ok((check_finite(nll, "sequence NLL")?, grads))
}

/// Gradient of one sequence's NLL with respect to the trainable tensors.
/// A dropout stream switches the encoder into training mode.
pub fn sequence_gradient(
    model: &SahpModel,
    seq: &Sequence,
    samples: &McSamples,
    dropout: Option<&mut rng::Rng>,
) -> Result<(SequenceNll, Vec<Tensor>)> {
    let fwd = Forward::run(&model.params, &model.config, &seq.events, dropout)?;
    let states = fwd.states();
    let (nll, [dmu, deta, dgamma]) = states_nll(&states, seq, samples)?;
    let rows = dmu.len();
    let grads = fwd.backward(
        Tensor::from_vec(rows, 1, dmu),
        Tensor::from_vec(rows, 1, deta),
        Tensor::from_vec(rows, 1, dgamma),
    );
    Ok((
        SequenceNll {
            nll,
            counted_events: seq.len() - 1,
        },
        grads,
    ))
}

/// Summed NLL and gradient of a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub nll: f64,
    pub counted_events: usize,
    /// In [`crate::model::ModelParams::trainable`] order.
    pub grads: Vec<Tensor>,
}

/// Gradient of the summed NLL over `batch`. Element `k` of the batch draws
/// its Monte Carlo locations from `samples_rng(k)` and, when `training` is
/// set, its dropout masks from `dropout_rng(k)`.
pub fn gradient(
    model: &SahpModel,
    batch: &[(usize, &Sequence)],
    n_samples: usize,
    seed: u64,
    step: u64,
    training: bool,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let step_mc = rng::derive_indexed(seed, rng::STREAM_MC, step);
    let step_dropout = rng::derive_indexed(seed, rng::STREAM_DROPOUT, step);
    let parts = batch
        .par_iter()
        .map(|&(idx, seq)| {
            let mut mc = rng::indexed_rng(step_mc, rng::STREAM_MC, idx as u64);
            let samples = McSamples::stratified(seq.len(), n_samples, &mut mc)?;
            let mut drop = rng::indexed_rng(step_dropout, rng::STREAM_DROPOUT, idx as u64);
            sequence_gradient(model, seq, &samples, training.then_some(&mut drop)).map_err(|e| match e {
                Error::Numeric(msg) => Error::numeric(format!("step {step}, sequence {idx}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut iter = parts.into_iter();
    let (first_nll, mut grads) = iter.next().expect("non-empty batch");
    let mut nll = first_nll.nll;
    let mut counted = first_nll.counted_events;
    for (p, g) in iter {
        nll += p.nll;
        counted += p.counted_events;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
    }
    if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric(format!("non-finite gradient at step {step}")));
    }
    Ok(BatchGradient {
        nll,
        counted_events: counted,
        grads,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub train_nll_per_event: f64,
    pub val_nll_per_event: f64,
    pub learning_rate: f64,
    /// Seconds since training started; the only nondeterministic column.
    pub wall_time: f64,
}

pub fn write_history_csv(rows: &[HistoryRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,step,train_nll_per_event,val_nll_per_event,learning_rate,wall_time")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.3}",
            r.epoch, r.step, r.train_nll_per_event, r.val_nll_per_event, r.learning_rate, r.wall_time
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation NLL.
    pub model: SahpModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub epochs_run: usize,
}

pub fn train(model: SahpModel, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, dataset, config, |_| {})
}

/// Like [`train`], calling `progress` after every history row is recorded.
pub fn train_with_progress(
    mut model: SahpModel,
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.params.validate(&model.config)?;
    if dataset.num_types != model.config.num_types {
        return Err(Error::TypeCountMismatch {
            expected: model.config.num_types,
            found: dataset.num_types,
        });
    }
    if dataset.splits.is_none() {
        return Err(Error::invalid("training needs a dataset with train/val/test split labels"));
    }
    // one-event sequences cannot contribute an event term
    let train: Vec<&Sequence> = dataset.split(Split::Train).into_iter().filter(|s| s.len() >= 2).collect();
    let val: Vec<&Sequence> = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(Error::invalid("training split has no sequence with at least 2 events"));
    }
    if val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }

    let started = Instant::now();
    let val_nll = |m: &SahpModel| {
        nll_per_event(m, &val, config.mc_samples, config.seed, rng::STREAM_VALIDATION_MC)
    };
    let initial_train = nll_per_event(&model, &train, config.mc_samples, config.seed, rng::STREAM_VALIDATION_MC)?;
    let initial_val = val_nll(&model)?;
    let mut history = vec![HistoryRow {
        epoch: 0,
        step: 0,
        train_nll_per_event: initial_train,
        val_nll_per_event: initial_val,
        learning_rate: 0.0,
        wall_time: started.elapsed().as_secs_f64(),
    }];
    progress(&history[0]);

    let mut x = model.params.flatten();
    let mut adam = Adam::new(x.len());
    let mut step = 0usize;
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.sort_unstable();
        order.shuffle(&mut rng::indexed_rng(config.seed, rng::STREAM_SHUFFLE, epoch as u64));
        let mut epoch_nll = 0.0;
        let mut epoch_events = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<(usize, &Sequence)> = chunk.iter().map(|&k| (k, train[k])).collect();
            let bg = gradient(&model, &batch, config.mc_samples, config.seed, step as u64, true)?;
            epoch_nll += bg.nll;
            epoch_events += bg.counted_events;
            let scale = 1.0 / bg.counted_events as f64;
            let mut g: Vec<f64> = bg.grads.iter().flat_map(|t| t.data().iter().map(|v| v * scale)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > config.grad_clip {
                let c = config.grad_clip / norm;
                g.iter_mut().for_each(|v| *v *= c);
            }
            lr = config.learning_rate_at(step);
            adam.step(&mut x, &g, lr);
            model.params.assign_flat(&x);
        }
        let train_nll = epoch_nll / epoch_events as f64;
        let val = val_nll(&model)?;
        if !train_nll.is_finite() {
            return Err(Error::numeric(format!("training NLL not finite after epoch {epoch}")));
        }
        let row = HistoryRow {
            epoch,
            step,
            train_nll_per_event: train_nll,
            val_nll_per_event: val,
            learning_rate: lr,
            wall_time: started.elapsed().as_secs_f64(),
        };
        progress(&row);
        history.push(row);

        let improved = match &best {
            None => true,
            Some((b, _, _)) => val < b - config.early_stop_delta,
        };
        if improved {
            best = Some((val, epoch, x.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_val_nll, best_epoch) = match &best {
        Some((v, e, params)) => {
            model.params.assign_flat(params);
            (*v, *e)
        }
        None => (initial_val, 0),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_nll,
        epochs_run,
    })
}
