//! Ground-truth multivariate Hawkes processes with parametric triggering
//! kernels, simulated by Ogata thinning.
//!
//! The dominating rate used for thinning is built from per-kernel tail suprema
//! (`sup_{t ≥ δ} φ(t)`), which stays valid for non-monotone kernels such as
//! the bounded sine.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event, Sequence};
use crate::error::{Error, Result};
use crate::intensity::{IntensityModel, IntervalIntensity};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `alpha · exp(-gamma t)`
    Exponential { alpha: f64, gamma: f64 },
    /// `scale · (offset + t)^(-exponent)`
    PowerLaw {
        scale: f64,
        offset: f64,
        exponent: f64,
    },
    /// `Σ alpha_k · exp(-gamma_k t)`, stored as `[alpha, gamma]` pairs.
    SumExponential { terms: Vec<(f64, f64)> },
    /// `max(0, sin(t) / divisor)` on `[0, support]`, zero beyond.
    BoundedSine { divisor: f64, support: f64 },
    Zero,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            KernelSpec::Exponential { alpha, gamma } => {
                *alpha >= 0.0 && alpha.is_finite() && *gamma > 0.0 && gamma.is_finite()
            }
            KernelSpec::PowerLaw {
                scale,
                offset,
                exponent,
            } => {
                *scale >= 0.0
                    && scale.is_finite()
                    && *offset > 0.0
                    && offset.is_finite()
                    && *exponent > 0.0
                    && exponent.is_finite()
            }
            KernelSpec::SumExponential { terms } => terms
                .iter()
                .all(|(a, g)| *a >= 0.0 && a.is_finite() && *g > 0.0 && g.is_finite()),
            KernelSpec::BoundedSine { divisor, support } => {
                *divisor > 0.0 && divisor.is_finite() && *support > 0.0 && support.is_finite()
            }
            KernelSpec::Zero => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid kernel parameters: {self:?}")))
        }
    }

    /// φ(t); zero for negative lags.
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match self {
            KernelSpec::Exponential { alpha, gamma } => alpha * (-gamma * t).exp(),
            KernelSpec::PowerLaw {
                scale,
                offset,
                exponent,
            } => scale * (offset + t).powf(-exponent),
            KernelSpec::SumExponential { terms } => {
                terms.iter().map(|(a, g)| a * (-g * t).exp()).sum()
            }
            KernelSpec::BoundedSine { divisor, support } => {
                if t > *support {
                    0.0
                } else {
                    (t.sin() / divisor).max(0.0)
                }
            }
            KernelSpec::Zero => 0.0,
        }
    }

    /// `sup_{t ≥ delta} φ(t)`.
    pub fn sup_tail(&self, delta: f64) -> f64 {
        let delta = delta.max(0.0);
        match self {
            KernelSpec::BoundedSine { divisor, support } => {
                if delta > *support {
                    return 0.0;
                }
                // next maximum of sin at π/2 + 2πk at or after delta
                let k = ((delta - FRAC_PI_2) / (2.0 * PI)).ceil();
                let peak = FRAC_PI_2 + 2.0 * PI * k;
                let best = if peak <= *support {
                    1.0
                } else {
                    delta.sin().max(support.sin())
                };
                (best / divisor).max(0.0)
            }
            // the remaining kernels are non-increasing on [0, ∞)
            other => other.eval(delta),
        }
    }

    /// `∫_0^∞ φ(t) dt` (infinite for power laws with exponent ≤ 1).
    pub fn integral(&self) -> f64 {
        match self {
            KernelSpec::Exponential { alpha, gamma } => alpha / gamma,
            KernelSpec::PowerLaw {
                scale,
                offset,
                exponent,
            } => {
                if *exponent <= 1.0 {
                    f64::INFINITY
                } else {
                    scale * offset.powf(1.0 - exponent) / (exponent - 1.0)
                }
            }
            KernelSpec::SumExponential { terms } => terms.iter().map(|(a, g)| a / g).sum(),
            KernelSpec::BoundedSine { divisor, support } => {
                let period = 2.0 * PI;
                let full = (support / period).floor();
                let rem = support - full * period;
                let partial = if rem <= PI { 1.0 - rem.cos() } else { 2.0 };
                (2.0 * full + partial) / divisor
            }
            KernelSpec::Zero => 0.0,
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, t: f64) -> f64 {
    spec.eval(t)
}

pub fn kernel_sup_tail(spec: &KernelSpec, delta: f64) -> f64 {
    spec.sup_tail(delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesSpec {
    pub num_types: usize,
    pub base: Vec<f64>,
    /// `kernels[u][v]`: effect of a past type-`v` event on type `u`.
    pub kernels: Vec<Vec<KernelSpec>>,
}

impl HawkesSpec {
    pub fn validate(&self) -> Result<()> {
        let u = self.num_types;
        if u == 0 || self.base.len() != u || self.kernels.len() != u {
            return Err(Error::invalid("spec dimensions do not match num_types"));
        }
        if self.base.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::invalid("base intensities must be finite and non-negative"));
        }
        for row in &self.kernels {
            if row.len() != u {
                return Err(Error::invalid("kernel matrix must be num_types × num_types"));
            }
            for k in row {
                k.validate()?;
            }
        }
        Ok(())
    }

    /// The two-type benchmark process: power-law, exponential, sum-of-exponentials
    /// and bounded-sine kernels with base rates 0.1 and 0.2.
    pub fn synthetic_two_type() -> Self {
        Self {
            num_types: 2,
            base: vec![0.1, 0.2],
            kernels: vec![
                vec![
                    KernelSpec::PowerLaw {
                        scale: 0.2,
                        offset: 0.5,
                        exponent: 1.3,
                    },
                    KernelSpec::Exponential {
                        alpha: 0.03,
                        gamma: 0.3,
                    },
                ],
                vec![
                    KernelSpec::SumExponential {
                        terms: vec![(0.05, 0.2), (0.16, 0.8)],
                    },
                    KernelSpec::BoundedSine {
                        divisor: 8.0,
                        support: 4.0,
                    },
                ],
            ],
        }
    }

    /// Matrix of kernel integrals; its spectral radius is the branching ratio.
    pub fn branching_matrix(&self) -> Vec<Vec<f64>> {
        self.kernels
            .iter()
            .map(|row| row.iter().map(KernelSpec::integral).collect())
            .collect()
    }

    fn intensity_unchecked(&self, history: &[Event], t: f64, u: usize) -> f64 {
        let row = &self.kernels[u];
        self.base[u]
            + history
                .iter()
                .map(|e| row[e.type_id].eval(t - e.time))
                .sum::<f64>()
    }

    /// Σ_u [μ_u + Σ_hist sup_{τ ≥ s - t'} φ_{u,v'}(τ)]: dominates the total intensity on [s, ∞).
    fn upper_bound(&self, history: &[Event], s: f64) -> f64 {
        (0..self.num_types)
            .map(|u| {
                let row = &self.kernels[u];
                self.base[u]
                    + history
                        .iter()
                        .map(|e| row[e.type_id].sup_tail(s - e.time))
                        .sum::<f64>()
            })
            .sum()
    }
}

/// λ_u(t) given a history strictly before `t`.
pub fn true_intensity(spec: &HawkesSpec, history: &[Event], t: f64, u: usize) -> Result<f64> {
    if u >= spec.num_types {
        return Err(Error::invalid(format!("type {u} out of range")));
    }
    if history.iter().any(|e| !(e.time < t)) {
        return Err(Error::invalid(format!("history is not strictly before t = {t}")));
    }
    Ok(spec.intensity_unchecked(history, t, u))
}

/// One realisation on (0, horizon], deterministic in `seed`.
pub fn simulate_thinning(spec: &HawkesSpec, horizon: f64, seed: u64) -> Result<Sequence> {
    spec.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon must be positive and finite"));
    }
    let mut rng = rng::Rng::seed_from_u64(seed);
    let mut events: Vec<Event> = Vec::new();
    let mut s = 0.0;
    let mut lambdas = vec![0.0; spec.num_types];
    loop {
        let bound = spec.upper_bound(&events, s);
        if bound <= 0.0 {
            break;
        }
        let u1: f64 = rng.gen();
        s += -(1.0 - u1).ln() / bound;
        if s > horizon {
            break;
        }
        for (u, l) in lambdas.iter_mut().enumerate() {
            *l = spec.intensity_unchecked(&events, s, u);
        }
        let draw = rng.gen::<f64>() * bound;
        let mut acc = 0.0;
        for (u, l) in lambdas.iter().enumerate() {
            acc += l;
            if draw < acc {
                // a zero gap (u1 == 0) would duplicate a timestamp
                if events.last().is_none_or(|e| s > e.time) {
                    events.push(Event::new(u, s));
                }
                break;
            }
        }
    }
    Ok(Sequence::new(events, horizon))
}

/// `n` independent sequences; sequence `k` uses sub-seed `k` of the simulation stream.
pub fn simulate_dataset(spec: &HawkesSpec, horizon: f64, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let sequences = (0..n)
        .into_par_iter()
        .map(|k| {
            simulate_thinning(
                spec,
                horizon,
                rng::derive_indexed(seed, rng::STREAM_SIMULATION, k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.num_types, sequences)
}

/// Left-limit intensities: row `u`, column `g` is λ_u(grid[g]) using events strictly before grid[g].
pub fn intensity_trace(spec: &HawkesSpec, seq: &Sequence, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("grid must be sorted"));
    }
    if grid.iter().any(|t| !(*t >= 0.0 && *t <= seq.horizon)) {
        return Err(Error::invalid("grid must lie within [0, horizon]"));
    }
    let mut out = vec![Vec::with_capacity(grid.len()); spec.num_types];
    for &t in grid {
        let history = seq.history_before(t);
        for (u, row) in out.iter_mut().enumerate() {
            row.push(spec.intensity_unchecked(history, t, u));
        }
    }
    Ok(out)
}

/// CSV with columns `time,lambda_0,...,lambda_{U-1}`.
pub fn write_trace_csv(grid: &[f64], trace: &[Vec<f64>], mut w: impl Write) -> Result<()> {
    let header: Vec<String> = std::iter::once("time".to_string())
        .chain((0..trace.len()).map(|u| format!("lambda_{u}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (g, t) in grid.iter().enumerate() {
        let row: Vec<String> = std::iter::once(t.to_string())
            .chain(trace.iter().map(|r| r[g].to_string()))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// The generating process as an [`IntensityModel`], for oracle comparisons.
#[derive(Debug, Clone)]
pub struct TrueModel {
    spec: Arc<HawkesSpec>,
}

impl TrueModel {
    pub fn new(spec: HawkesSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec: Arc::new(spec) })
    }
}

/// True intensities after event `index` of a shared history.
#[derive(Debug, Clone)]
pub struct TrueInterval {
    spec: Arc<HawkesSpec>,
    events: Arc<Vec<Event>>,
    index: usize,
}

impl IntervalIntensity for TrueInterval {
    fn num_types(&self) -> usize {
        self.spec.num_types
    }

    fn start(&self) -> f64 {
        self.events[self.index].time
    }

    /// Left limit at `t`: the event at `start` counts only for `t > start`.
    fn intensity(&self, u: usize, t: f64) -> f64 {
        let end = if t > self.start() { self.index + 1 } else { self.index };
        self.spec.intensity_unchecked(&self.events[..end], t, u)
    }
}

impl IntensityModel for TrueModel {
    type Interval = TrueInterval;

    fn num_types(&self) -> usize {
        self.spec.num_types
    }

    fn intervals(&self, events: &[Event]) -> Result<Vec<TrueInterval>> {
        let shared = Arc::new(events.to_vec());
        Ok((0..events.len())
            .map(|index| TrueInterval {
                spec: Arc::clone(&self.spec),
                events: Arc::clone(&shared),
                index,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn kernel_values() {
        let exp = KernelSpec::Exponential {
            alpha: 0.03,
            gamma: 0.3,
        };
        assert_eq!(exp.eval(0.0), 0.03);
        let pl = KernelSpec::PowerLaw {
            scale: 0.2,
            offset: 0.5,
            exponent: 1.3,
        };
        // 0.2 · 0.5^-1.3 = 0.2 · 2^1.3
        assert!(close(pl.eval(0.0), 0.2 * 2f64.powf(1.3), 1e-15));
        assert!(close(pl.eval(0.0), 0.49246, 1e-5));
        let sine = KernelSpec::BoundedSine {
            divisor: 8.0,
            support: 4.0,
        };
        assert!(close(sine.eval(FRAC_PI_2), 0.125, 1e-15));
        assert_eq!(sine.eval(5.0), 0.0);
        // negative lobe of sin on (π, 4] is clipped
        assert_eq!(sine.eval(3.5), 0.0);
        for k in [exp, pl, sine, KernelSpec::Zero] {
            assert_eq!(k.eval(-1e-9), 0.0);
        }
    }

    #[test]
    fn sup_tail_values() {
        let exp = KernelSpec::Exponential {
            alpha: 0.7,
            gamma: 1.5,
        };
        assert!(close(exp.sup_tail(2.0), 0.7 * (-3.0f64).exp(), 1e-15));
        let sine = KernelSpec::BoundedSine {
            divisor: 8.0,
            support: 4.0,
        };
        assert!(close(sine.sup_tail(0.0), 0.125, 1e-15));
        assert_eq!(sine.sup_tail(5.0), 0.0);
        // past the peak: sin is decreasing on [π/2, 4]
        assert!(close(sine.sup_tail(2.0), 2f64.sin() / 8.0, 1e-15));
        assert_eq!(sine.sup_tail(3.5), 0.0);
    }

    #[test]
    fn sup_tail_dominates_on_dense_grid() {
        let kernels = HawkesSpec::synthetic_two_type()
            .kernels
            .into_iter()
            .flatten()
            .chain([KernelSpec::BoundedSine {
                divisor: 2.0,
                support: 20.0,
            }]);
        for k in kernels {
            let mut prev = f64::INFINITY;
            for i in 0..=400 {
                let delta = i as f64 * 0.05;
                let sup = k.sup_tail(delta);
                assert!(sup <= prev + 1e-15, "{k:?} not non-increasing at {delta}");
                prev = sup;
                for j in 0..=200 {
                    let t = delta + j as f64 * 0.05;
                    assert!(k.eval(t) <= sup + 1e-15, "{k:?} bound violated at {t}");
                }
            }
        }
    }

    #[test]
    fn integrals_match_quadrature() {
        for k in HawkesSpec::synthetic_two_type().kernels.into_iter().flatten() {
            if matches!(k, KernelSpec::PowerLaw { .. }) {
                continue;
            }
            let h = 1e-3;
            let quad: f64 = (0..100_000).map(|i| k.eval((i as f64 + 0.5) * h) * h).sum();
            assert!(close(quad, k.integral(), 1e-5), "{k:?}: {quad} vs {}", k.integral());
        }
    }

    #[test]
    fn true_intensity_hand_values() {
        let spec = HawkesSpec {
            num_types: 1,
            base: vec![0.1],
            kernels: vec![vec![KernelSpec::Exponential {
                alpha: 0.2,
                gamma: 1.0,
            }]],
        };
        assert_eq!(true_intensity(&spec, &[], 3.0, 0).unwrap(), 0.1);
        let one = true_intensity(&spec, &[Event::new(0, 0.0)], 1.0, 0).unwrap();
        assert!(close(one, 0.1 + 0.2 * (-1.0f64).exp(), 1e-15));
        assert!(close(one, 0.17358, 1e-5));
        let a = true_intensity(&spec, &[Event::new(0, 0.5)], 2.0, 0).unwrap();
        let both =
            true_intensity(&spec, &[Event::new(0, 0.0), Event::new(0, 0.5)], 2.0, 0).unwrap();
        let b = true_intensity(&spec, &[Event::new(0, 0.0)], 2.0, 0).unwrap();
        assert!(close(both, a + b - 0.1, 1e-15));
        assert!(true_intensity(&spec, &[Event::new(0, 1.0)], 1.0, 0).is_err());
    }

    #[test]
    fn zero_process_is_empty() {
        let spec = HawkesSpec {
            num_types: 2,
            base: vec![0.0, 0.0],
            kernels: vec![vec![KernelSpec::Zero; 2]; 2],
        };
        assert!(simulate_thinning(&spec, 100.0, 1).unwrap().is_empty());
    }

    #[test]
    fn simulation_is_valid_and_deterministic() {
        let spec = HawkesSpec::synthetic_two_type();
        let a = simulate_thinning(&spec, 60.0, 11).unwrap();
        let b = simulate_thinning(&spec, 60.0, 11).unwrap();
        assert_eq!(a, b);
        assert!(crate::data::validate_sequence(&a, 2).is_empty());
        assert!(!a.is_empty());
    }

    #[test]
    fn trace_uses_left_limits() {
        let spec = HawkesSpec {
            num_types: 2,
            base: vec![0.1, 0.3],
            kernels: vec![
                vec![
                    KernelSpec::Exponential {
                        alpha: 0.2,
                        gamma: 1.0,
                    },
                    KernelSpec::Zero,
                ],
                vec![KernelSpec::Zero, KernelSpec::Zero],
            ],
        };
        let seq = Sequence::new(vec![Event::new(0, 1.0)], 3.0);
        let grid = [0.0, 0.5, 1.0, 2.0];
        let tr = intensity_trace(&spec, &seq, &grid).unwrap();
        assert_eq!(tr[0][..3], [0.1, 0.1, 0.1]);
        assert_eq!(tr[1], vec![0.3; 4]);
        let expect = true_intensity(&spec, &seq.events, 2.0, 0).unwrap();
        assert_eq!(tr[0][3], expect);
        assert!(intensity_trace(&spec, &seq, &[1.0, 0.5]).is_err());
        let mut csv = Vec::new();
        write_trace_csv(&grid, &tr, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("time,lambda_0,lambda_1\n0,0.1,0.3\n"));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = HawkesSpec::synthetic_two_type();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"bounded_sine\""));
        let back: HawkesSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
