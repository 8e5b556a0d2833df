//! Next-event prediction and evaluation metrics.
//!
//! Prediction integrates the next-event density `p(t) = λ(t)·exp(-∫λ)` on a
//! geometric grid that starts at the last event and stops once the survival
//! probability falls below a cutoff. The mass beyond the cutoff is completed
//! with an exponential tail at the final total intensity, so the truncation
//! does not bias the expected time.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Event, Sequence};
use crate::error::{Error, Result};
use crate::intensity::{IntensityModel, IntervalIntensity};
use crate::model::SahpModel;
use crate::rng;
use crate::simulator::{intensity_trace, HawkesSpec};
use crate::training::nll_per_event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// First step length as a fraction of `1/λ(t_i)`.
    pub initial_step: f64,
    /// Ratio between consecutive step lengths.
    pub growth: f64,
    /// Stop once the survival probability drops below this.
    pub survival_cutoff: f64,
    /// Relative tolerance for bisecting a step whose midpoint intensity
    /// departs from the chord.
    pub refine_tol: f64,
    pub max_steps: usize,
    /// Longest admissible search span after the last event.
    pub max_span: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            initial_step: 1e-3,
            growth: 1.005,
            survival_cutoff: 1e-3,
            refine_tol: 1e-4,
            max_steps: 1_000_000,
            max_span: 1e9,
        }
    }
}

impl QuadratureConfig {
    /// Twice the resolution: half the first step and half the log growth rate.
    pub fn refined(&self) -> Self {
        Self {
            initial_step: self.initial_step / 2.0,
            growth: self.growth.sqrt(),
            refine_tol: self.refine_tol / 2.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_step > 0.0) || !(self.growth >= 1.0) {
            return Err(Error::invalid("quadrature needs initial_step > 0 and growth >= 1"));
        }
        if !(self.survival_cutoff > 0.0 && self.survival_cutoff < 1.0) {
            return Err(Error::invalid("survival_cutoff must lie in (0, 1)"));
        }
        if !(self.refine_tol > 0.0) || self.max_steps == 0 || !(self.max_span > 0.0) {
            return Err(Error::invalid("refine_tol, max_steps and max_span must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub predicted_time: f64,
    /// Probability that the next event has each type; sums to 1.
    pub type_scores: Vec<f64>,
    pub predicted_type: usize,
    /// Density mass integrated on the grid before tail completion.
    pub captured_mass: f64,
}

fn positive_total<I: IntervalIntensity>(iv: &I, t: f64) -> Result<f64> {
    let v = iv.total(t);
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(Error::numeric(format!("total intensity {v} at time {t}")))
    }
}

/// `∫_a^b λ(s) ds` by recursive trapezoid bisection.
fn hazard<I: IntervalIntensity>(iv: &I, a: f64, b: f64, fa: f64, fb: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let fm = iv.total(m);
    let coarse = 0.5 * (b - a) * (fa + fb);
    let fine = 0.25 * (b - a) * (fa + 2.0 * fm + fb);
    if depth == 0 || (coarse - fine).abs() <= tol * fine.abs().max(1e-300) {
        fine
    } else {
        hazard(iv, a, m, fa, fm, tol, depth - 1) + hazard(iv, m, b, fm, fb, tol, depth - 1)
    }
}

/// Density of the next event time at `t > start` given the interval's intensities.
pub fn interval_density<I: IntervalIntensity>(iv: &I, t: f64) -> Result<f64> {
    let start = iv.start();
    if !(t > start) {
        return Err(Error::invalid(format!("time {t} is not after the last event at {start}")));
    }
    let (fa, fb) = (positive_total(iv, start)?, positive_total(iv, t)?);
    // split the range geometrically so the start transient is resolved
    let mut integral = 0.0;
    let mut a = start;
    let mut f_a = fa;
    let span = t - start;
    let pieces = 32;
    for k in 1..=pieces {
        let b = if k == pieces {
            t
        } else {
            start + span * (2f64.powi(k - pieces))
        };
        let f_b = if k == pieces { fb } else { iv.total(b) };
        integral += hazard(iv, a, b, f_a, f_b, 1e-10, 30);
        a = b;
        f_a = f_b;
    }
    Ok(fb * (-integral).exp())
}

/// Density of the next event at `t` after `prefix`.
pub fn next_event_density<M: IntensityModel>(model: &M, prefix: &[Event], t: f64) -> Result<f64> {
    let ivs = model.intervals(prefix)?;
    let last = ivs.last().ok_or_else(|| Error::invalid("prefix is empty"))?;
    interval_density(last, t)
}

/// Expected next time and type probabilities for one interval.
pub fn predict_interval<I: IntervalIntensity>(iv: &I, quad: &QuadratureConfig) -> Result<PredictionResult> {
    let u = iv.num_types();
    let start = iv.start();
    let lam0 = positive_total(iv, start)?;
    if lam0 <= 0.0 {
        return Err(Error::numeric(format!("total intensity vanishes at {start}")));
    }
    let mut h = quad.initial_step / lam0;
    let per_type = |t: f64| -> Vec<f64> { (0..u).map(|v| iv.intensity(v, t)).collect() };

    // running integrals: mass, ∫(t - t_i)p, ∫λ_u·S
    let mut mass = 0.0;
    let mut first_moment = 0.0;
    let mut type_mass = vec![0.0; u];

    let mut t = start;
    let mut lam_t = lam0;
    let mut lam_u = per_type(start);
    let mut cum = 0.0;
    let mut surv = 1.0;
    let mut steps = 0usize;
    while surv >= quad.survival_cutoff {
        steps += 1;
        if steps > quad.max_steps || t - start > quad.max_span {
            return Err(Error::numeric(format!(
                "next-event search after t = {start} exceeded its limit (survival still {surv:.3e}); \
                 the intensity is too close to zero"
            )));
        }
        let mut step = h;
        // bisect until the chord matches the midpoint
        let (tn, lam_n, lam_un) = loop {
            let tn = t + step;
            let lam_n = positive_total(iv, tn)?;
            let mid = positive_total(iv, t + 0.5 * step)?;
            let chord = 0.5 * (lam_t + lam_n);
            if (mid - chord).abs() <= quad.refine_tol * chord.max(1e-300) || step <= h * 1e-6 {
                break (tn, lam_n, per_type(tn));
            }
            step *= 0.5;
        };
        let cum_n = cum + 0.5 * (tn - t) * (lam_t + lam_n);
        let surv_n = (-cum_n).exp();
        let (p_t, p_n) = (lam_t * surv, lam_n * surv_n);
        let dt = tn - t;
        mass += 0.5 * dt * (p_t + p_n);
        first_moment += 0.5 * dt * ((t - start) * p_t + (tn - start) * p_n);
        for v in 0..u {
            type_mass[v] += 0.5 * dt * (lam_u[v] * surv + lam_un[v] * surv_n);
        }
        t = tn;
        lam_t = lam_n;
        lam_u = lam_un;
        cum = cum_n;
        surv = surv_n;
        if step == h {
            h *= quad.growth;
        }
    }

    // exponential completion of the remaining mass at the final intensity
    let tail = surv;
    let total = mass + tail;
    let tail_moment = if lam_t > 0.0 { tail * ((t - start) + 1.0 / lam_t) } else { 0.0 };
    let predicted_time = start + (first_moment + tail_moment) / total;
    let mut scores: Vec<f64> = (0..u)
        .map(|v| {
            let share = if lam_t > 0.0 { lam_u[v] / lam_t } else { 1.0 / u as f64 };
            type_mass[v] + tail * share
        })
        .collect();
    let norm: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= norm);
    let predicted_type = argmax(&scores);
    if !predicted_time.is_finite() || !(predicted_time > start) {
        return Err(Error::numeric(format!("predicted time {predicted_time} after {start}")));
    }
    Ok(PredictionResult {
        predicted_time,
        type_scores: scores,
        predicted_type,
        captured_mass: mass,
    })
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_next<M: IntensityModel>(model: &M, prefix: &[Event], quad: &QuadratureConfig) -> Result<PredictionResult> {
    let ivs = model.intervals(prefix)?;
    let last = ivs.last().ok_or_else(|| Error::invalid("prefix is empty"))?;
    predict_interval(last, quad)
}

/// Per-interval predictions for a sequence: entry `i` predicts event `i + 1`.
pub fn predict_sequence<M: IntensityModel>(
    model: &M,
    seq: &Sequence,
    quad: &QuadratureConfig,
) -> Result<Vec<PredictionResult>> {
    if seq.len() < 2 {
        return Ok(Vec::new());
    }
    let ivs = model.intervals(&seq.events)?;
    ivs[..seq.len() - 1].iter().map(|iv| predict_interval(iv, quad)).collect()
}

/// Macro-averaged F1 over all `num_types` classes; a class with no true and
/// no predicted instances scores 0.
pub fn macro_f1(truth: &[usize], predicted: &[usize], num_types: usize) -> f64 {
    let mut tp = vec![0usize; num_types];
    let mut fp = vec![0usize; num_types];
    let mut fneg = vec![0usize; num_types];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let sum: f64 = (0..num_types)
        .map(|u| {
            let denom = 2 * tp[u] + fp[u] + fneg[u];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[u] as f64 / denom as f64
            }
        })
        .sum();
    sum / num_types as f64
}

/// `((t̂ - t_i) - (t_next - t_i)) / (t_next - t_i)`, or `None` for a zero-length interval.
pub fn scaled_error(t_last: f64, t_next: f64, predicted: f64) -> Option<f64> {
    let truth = t_next - t_last;
    (truth > 0.0).then(|| ((predicted - t_last) - truth) / truth)
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Pairs of matching empirical quantiles of two samples.
pub fn qq_data(true_values: &[f64], estimated: &[f64], percentiles: &[f64]) -> Result<Vec<(f64, f64)>> {
    if true_values.is_empty() || estimated.is_empty() {
        return Err(Error::invalid("QQ samples must be non-empty"));
    }
    if let Some(p) = percentiles.iter().find(|p| !(**p > 0.0 && **p < 100.0)) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 100)")));
    }
    if percentiles.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("percentiles must be sorted"));
    }
    let sort = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (a, b) = (sort(true_values), sort(estimated));
    Ok(percentiles.iter().map(|p| (quantile(&a, *p), quantile(&b, *p))).collect())
}

pub fn default_percentiles() -> Vec<f64> {
    (1..100).map(f64::from).collect()
}

/// Quantile pairs for one event type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqSeries {
    pub type_id: usize,
    pub percentiles: Vec<f64>,
    /// `(true quantile, estimated quantile)`
    pub pairs: Vec<(f64, f64)>,
}

impl QqSeries {
    /// Mean `|q_est - q_true|` over percentiles in `[lo, hi]`.
    pub fn mean_abs_deviation(&self, lo: f64, hi: f64) -> f64 {
        let devs: Vec<f64> = self
            .percentiles
            .iter()
            .zip(&self.pairs)
            .filter(|(p, _)| **p >= lo && **p <= hi)
            .map(|(_, (t, e))| (e - t).abs())
            .collect();
        devs.iter().sum::<f64>() / devs.len() as f64
    }
}

/// Model and true intensities of every type at each event time after the
/// first (left limits), pooled over `sequences`. Returns `[type] -> (true, model)`.
pub fn event_time_intensities<M: IntensityModel>(
    model: &M,
    truth: &HawkesSpec,
    sequences: &[&Sequence],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let u = model.num_types();
    if truth.num_types != u {
        return Err(Error::TypeCountMismatch {
            expected: u,
            found: truth.num_types,
        });
    }
    let per_seq = sequences
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|seq| {
            let grid: Vec<f64> = seq.events[1..].iter().map(|e| e.time).collect();
            let true_trace = intensity_trace(truth, seq, &grid)?;
            let ivs = model.intervals(&seq.events)?;
            let est: Vec<Vec<f64>> = grid
                .iter()
                .enumerate()
                .map(|(k, t)| (0..u).map(|v| ivs[k].intensity(v, *t)).collect())
                .collect();
            Ok((true_trace, est))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![(Vec::new(), Vec::new()); u];
    // the true trace is laid out [type][time], the model rows [time][type]
    for (tr, est) in per_seq {
        for (g, row_e) in est.iter().enumerate() {
            for v in 0..u {
                out[v].0.push(tr[v][g]);
                out[v].1.push(row_e[v]);
            }
        }
    }
    Ok(out)
}

/// Per-type QQ series of model vs true intensities at event times.
pub fn intensity_qq<M: IntensityModel>(
    model: &M,
    truth: &HawkesSpec,
    sequences: &[&Sequence],
    percentiles: &[f64],
) -> Result<Vec<QqSeries>> {
    event_time_intensities(model, truth, sequences)?
        .into_iter()
        .enumerate()
        .map(|(type_id, (t, e))| {
            Ok(QqSeries {
                type_id,
                percentiles: percentiles.to_vec(),
                pairs: qq_data(&t, &e, percentiles)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// Row `u`: average attention from type-`u` queries to each key type, row-normalised.
    pub matrix: Vec<Vec<f64>>,
    /// Rows with no attention mass, reported as uniform.
    pub uniform_rows: Vec<usize>,
}

/// Expected attention between event types, averaged over layers and heads and
/// normalised by how often each (query type, key type) pair co-occurs.
pub fn attention_map(model: &SahpModel, sequences: &[&Sequence]) -> Result<AttentionMap> {
    if sequences.is_empty() {
        return Err(Error::invalid("attention map needs at least one sequence"));
    }
    let u = model.config.num_types;
    let per_seq = sequences
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|seq| {
            let fwd = model.forward(&seq.events)?;
            let maps = fwd.attention();
            let n = seq.len();
            let layers_heads = (maps.len() * maps[0].len()) as f64;
            let mut acc = vec![vec![0.0; u]; u];
            let mut count = vec![vec![0.0; u]; u];
            for i in 0..n {
                for q in 0..u {
                    let row = i * u + q;
                    for j in 0..=i {
                        let mut w = 0.0;
                        for layer in &maps {
                            for head in layer {
                                w += head.get(row, j);
                            }
                        }
                        let k = seq.events[j].type_id;
                        acc[q][k] += w / layers_heads;
                        count[q][k] += 1.0;
                    }
                }
            }
            Ok((acc, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![vec![0.0; u]; u];
    let mut count = vec![vec![0.0; u]; u];
    for (a, c) in per_seq {
        for q in 0..u {
            for k in 0..u {
                acc[q][k] += a[q][k];
                count[q][k] += c[q][k];
            }
        }
    }
    let mut uniform_rows = Vec::new();
    let matrix = (0..u)
        .map(|q| {
            let row: Vec<f64> = (0..u)
                .map(|k| if count[q][k] > 0.0 { acc[q][k] / count[q][k] } else { 0.0 })
                .collect();
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter().map(|v| v / s).collect()
            } else {
                uniform_rows.push(q);
                vec![1.0 / u as f64; u]
            }
        })
        .collect();
    Ok(AttentionMap { matrix, uniform_rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mc_samples: usize,
    pub seed: u64,
    pub quadrature: QuadratureConfig,
    pub percentiles: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: 10,
            seed: 0,
            quadrature: QuadratureConfig::default(),
            percentiles: default_percentiles(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll_per_event: f64,
    pub macro_f1: f64,
    pub rmse_scaled: f64,
    pub num_sequences: usize,
    pub num_predictions: usize,
    /// Prediction targets skipped in the RMSE because the true gap was zero.
    pub zero_length_intervals: usize,
    /// Smallest grid mass captured by any prediction.
    pub min_captured_mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qq_pairs: Option<Vec<QqSeries>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_map: Option<AttentionMap>,
}

impl EvalReport {
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Likelihood and prediction metrics on `sequences`. When `truth` is given
/// the report also carries per-type intensity QQ data.
pub fn evaluate<M: IntensityModel>(
    model: &M,
    sequences: &[&Sequence],
    config: &EvalConfig,
    truth: Option<&HawkesSpec>,
) -> Result<EvalReport> {
    if sequences.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    config.quadrature.validate()?;
    let nll = nll_per_event(model, sequences, config.mc_samples, config.seed, rng::STREAM_EVAL_MC)?;
    let per_seq = sequences
        .par_iter()
        .map(|seq| predict_sequence(model, seq, &config.quadrature))
        .collect::<Result<Vec<_>>>()?;

    let mut truth_types = Vec::new();
    let mut pred_types = Vec::new();
    let mut sq = 0.0;
    let mut n_err = 0usize;
    let mut zero = 0usize;
    let mut min_mass = f64::INFINITY;
    for (seq, preds) in sequences.iter().zip(&per_seq) {
        for (i, p) in preds.iter().enumerate() {
            let (last, next) = (&seq.events[i], &seq.events[i + 1]);
            truth_types.push(next.type_id);
            pred_types.push(p.predicted_type);
            min_mass = min_mass.min(p.captured_mass);
            match scaled_error(last.time, next.time, p.predicted_time) {
                Some(e) => {
                    sq += e * e;
                    n_err += 1;
                }
                None => zero += 1,
            }
        }
    }
    let qq_pairs = truth
        .map(|spec| intensity_qq(model, spec, sequences, &config.percentiles))
        .transpose()?;
    Ok(EvalReport {
        nll_per_event: nll,
        macro_f1: macro_f1(&truth_types, &pred_types, model.num_types()),
        rmse_scaled: if n_err > 0 { (sq / n_err as f64).sqrt() } else { 0.0 },
        num_sequences: sequences.len(),
        num_predictions: truth_types.len(),
        zero_length_intervals: zero,
        min_captured_mass: if min_mass.is_finite() { min_mass } else { 1.0 },
        qq_pairs,
        attention_map: None,
    })
}

pub fn write_qq_csv(series: &[QqSeries], mut w: impl Write) -> Result<()> {
    writeln!(w, "type,percentile,q_true,q_est")?;
    for s in series {
        for (p, (t, e)) in s.percentiles.iter().zip(&s.pairs) {
            writeln!(w, "{},{},{},{}", s.type_id, p, t, e)?;
        }
    }
    Ok(())
}

pub fn write_attention_csv(map: &AttentionMap, mut w: impl Write) -> Result<()> {
    let u = map.matrix.len();
    let header: Vec<String> = (0..u).map(|k| format!("key_{k}")).collect();
    writeln!(w, "query_type,{}", header.join(","))?;
    for (q, row) in map.matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{q},{}", cells.join(","))?;
    }
    Ok(())
}

/// One row per predicted event of every sequence.
pub fn write_predictions_csv(
    sequences: &[&Sequence],
    predictions: &[Vec<PredictionResult>],
    num_types: usize,
    mut w: impl Write,
) -> Result<()> {
    let scores: Vec<String> = (0..num_types).map(|k| format!("score_{k}")).collect();
    writeln!(
        w,
        "sequence,index,last_time,predicted_time,predicted_type,true_time,true_type,{}",
        scores.join(",")
    )?;
    for (s, (seq, preds)) in sequences.iter().zip(predictions).enumerate() {
        for (i, p) in preds.iter().enumerate() {
            let next = &seq.events[i + 1];
            let cells: Vec<String> = p.type_scores.iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{s},{},{},{},{},{},{},{}",
                i + 1,
                seq.events[i].time,
                p.predicted_time,
                p.predicted_type,
                next.time,
                next.type_id,
                cells.join(",")
            )?;
        }
    }
    Ok(())
}

/// Count of (query type, key type) pairs, for diagnostics.
pub fn pair_counts(sequences: &[&Sequence], num_types: usize) -> BTreeMap<(usize, usize), usize> {
    let mut out = BTreeMap::new();
    for seq in sequences {
        for (i, _) in seq.events.iter().enumerate() {
            for e in &seq.events[..=i] {
                for q in 0..num_types {
                    *out.entry((q, e.type_id)).or_insert(0) += 1;
                }
            }
        }
    }
    out
}
