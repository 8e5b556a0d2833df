//! Multivariate Hawkes process with exponential kernels
//! `φ_{u,v}(t) = α_{u,v} exp(-γ_{u,v} t)`: exact log-likelihood with the
//! closed-form compensator, analytic gradients in log-parameter space and
//! maximum-likelihood fitting.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event, Sequence, Split};
use crate::error::{Error, Result};
use crate::intensity::{IntensityModel, IntervalIntensity};
use crate::optim::{self, LbfgsOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub base: Vec<f64>,
    /// `excitation[u][v]` = α_{u,v}, row-major.
    pub excitation: Vec<Vec<f64>>,
    /// `decay[u][v]` = γ_{u,v}, row-major.
    pub decay: Vec<Vec<f64>>,
}

impl HawkesParams {
    pub fn num_types(&self) -> usize {
        self.base.len()
    }

    pub fn uniform(base: Vec<f64>, alpha: f64, gamma: f64) -> Self {
        let u = base.len();
        Self {
            base,
            excitation: vec![vec![alpha; u]; u],
            decay: vec![vec![gamma; u]; u],
        }
    }

    /// μ = event count / (U·T) averaged over sequences, α = 0.1, γ = 1.
    pub fn initial_guess(sequences: &[&Sequence], num_types: usize) -> Self {
        let mu = if sequences.is_empty() {
            1.0
        } else {
            sequences
                .iter()
                .map(|s| s.len() as f64 / (num_types as f64 * s.horizon))
                .sum::<f64>()
                / sequences.len() as f64
        };
        Self::uniform(vec![mu.max(1e-6); num_types], 0.1, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.num_types();
        if u == 0 || self.excitation.len() != u || self.decay.len() != u {
            return Err(Error::invalid("parameter dimensions do not agree"));
        }
        if self.excitation.iter().chain(&self.decay).any(|r| r.len() != u) {
            return Err(Error::invalid("excitation and decay must be U × U"));
        }
        let finite_nonneg = |x: &f64| x.is_finite() && *x >= 0.0;
        if !self.base.iter().all(finite_nonneg)
            || !self.excitation.iter().flatten().all(finite_nonneg)
        {
            return Err(Error::invalid("base and excitation must be finite and non-negative"));
        }
        if !self.decay.iter().flatten().all(|g| g.is_finite() && *g > 0.0) {
            return Err(Error::invalid("decay must be finite and strictly positive"));
        }
        Ok(())
    }

    fn unchecked_intensity(&self, history: &[Event], t: f64, u: usize) -> f64 {
        self.base[u]
            + history
                .iter()
                .map(|e| {
                    self.excitation[u][e.type_id]
                        * (-self.decay[u][e.type_id] * (t - e.time)).exp()
                })
                .sum::<f64>()
    }
}

pub fn hp_intensity(params: &HawkesParams, history: &[Event], t: f64, u: usize) -> Result<f64> {
    if u >= params.num_types() {
        return Err(Error::invalid(format!("type {u} out of range")));
    }
    if history.iter().any(|e| !(e.time < t)) {
        return Err(Error::invalid(format!("history is not strictly before t = {t}")));
    }
    Ok(params.unchecked_intensity(history, t, u))
}

/// `∫_0^T Σ_u λ_u(τ) dτ` in closed form.
pub fn hp_compensator(params: &HawkesParams, seq: &Sequence) -> f64 {
    let t_end = seq.horizon;
    let mut total: f64 = params.base.iter().sum::<f64>() * t_end;
    for e in &seq.events {
        let rest = t_end - e.time;
        for u in 0..params.num_types() {
            let a = params.excitation[u][e.type_id];
            let g = params.decay[u][e.type_id];
            total += a / g * (1.0 - (-g * rest).exp());
        }
    }
    total
}

/// Gradient of a log-likelihood with respect to (log μ, log α, log γ).
#[derive(Debug, Clone, PartialEq)]
pub struct LogParamGradient {
    pub base: Vec<f64>,
    pub excitation: Vec<Vec<f64>>,
    pub decay: Vec<Vec<f64>>,
}

impl LogParamGradient {
    fn zeros(u: usize) -> Self {
        Self {
            base: vec![0.0; u],
            excitation: vec![vec![0.0; u]; u],
            decay: vec![vec![0.0; u]; u],
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.base.iter_mut().zip(&other.base) {
            *a += b;
        }
        for (ra, rb) in self
            .excitation
            .iter_mut()
            .chain(self.decay.iter_mut())
            .zip(other.excitation.iter().chain(&other.decay))
        {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
    }
}

/// Log-likelihood over a window. With `condition_on_first` the first event is
/// treated as given history: its log-intensity and the compensator on
/// `[0, t_1]` are dropped, so the window is `(t_1, T]`.
fn loglik_impl(
    params: &HawkesParams,
    seq: &Sequence,
    condition_on_first: bool,
    want_grad: bool,
) -> Result<(f64, Option<LogParamGradient>)> {
    let u_n = params.num_types();
    let mut grad = want_grad.then(|| LogParamGradient::zeros(u_n));
    // r[u][v] = Σ_{j<i, v_j=v} exp(-γ_uv (t_i - t_j)); d[u][v] = same weighted by (t_i - t_j)
    let mut r = vec![vec![0.0; u_n]; u_n];
    let mut d = vec![vec![0.0; u_n]; u_n];
    let mut ll = 0.0;
    let mut prev: Option<&Event> = None;

    for (i, e) in seq.events.iter().enumerate() {
        if let Some(p) = prev {
            let dt = e.time - p.time;
            for u in 0..u_n {
                for v in 0..u_n {
                    let hit = if p.type_id == v { 1.0 } else { 0.0 };
                    let decay = (-params.decay[u][v] * dt).exp();
                    let r_prev = r[u][v] + hit;
                    d[u][v] = decay * (d[u][v] + dt * r_prev);
                    r[u][v] = decay * r_prev;
                }
            }
        }
        prev = Some(e);
        if condition_on_first && i == 0 {
            continue;
        }
        let u = e.type_id;
        let lambda = params.base[u]
            + (0..u_n).map(|v| params.excitation[u][v] * r[u][v]).sum::<f64>();
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::numeric(format!(
                "infeasible parameters: intensity {lambda} at event {i}"
            )));
        }
        ll += lambda.ln();
        if let Some(g) = grad.as_mut() {
            g.base[u] += params.base[u] / lambda;
            for v in 0..u_n {
                let a = params.excitation[u][v];
                g.excitation[u][v] += a * r[u][v] / lambda;
                g.decay[u][v] += -a * params.decay[u][v] * d[u][v] / lambda;
            }
        }
    }

    // compensator
    let t0 = match (condition_on_first, seq.events.first()) {
        (true, Some(first)) => first.time,
        _ => 0.0,
    };
    let span = seq.horizon - t0;
    for u in 0..u_n {
        ll -= params.base[u] * span;
        if let Some(g) = grad.as_mut() {
            g.base[u] -= params.base[u] * span;
        }
    }
    for e in &seq.events {
        let rest = seq.horizon - e.time;
        for u in 0..u_n {
            let a = params.excitation[u][e.type_id];
            let gm = params.decay[u][e.type_id];
            let ex = (-gm * rest).exp();
            let one_minus = -(-gm * rest).exp_m1();
            ll -= a / gm * one_minus;
            if let Some(g) = grad.as_mut() {
                g.excitation[u][e.type_id] -= a / gm * one_minus;
                // d/dlogγ of (a/γ)(1 - e^{-γ s}) = -(a/γ)(1 - e^{-γ s}) + a s e^{-γ s}
                g.decay[u][e.type_id] -= -a / gm * one_minus + a * rest * ex;
            }
        }
    }
    Ok((ll, grad))
}

/// `Σ_i log λ_{v_i}(t_i) − ∫_0^T λ`.
pub fn hp_loglik(params: &HawkesParams, seq: &Sequence) -> Result<f64> {
    Ok(loglik_impl(params, seq, false, false)?.0)
}

/// Log-likelihood and its gradient with respect to the log-parameters.
pub fn hp_loglik_grad(params: &HawkesParams, seq: &Sequence) -> Result<(f64, LogParamGradient)> {
    let (ll, g) = loglik_impl(params, seq, false, true)?;
    Ok((ll, g.expect("gradient requested")))
}

/// Log-likelihood on `(t_1, T]` with the first event as given history; the same
/// accounting window the neural model is trained and evaluated on.
pub fn hp_window_loglik(params: &HawkesParams, seq: &Sequence) -> Result<f64> {
    if seq.is_empty() {
        return Ok(0.0);
    }
    Ok(loglik_impl(params, seq, true, false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub rel_tol: f64,
    /// Fit one decay shared by all type pairs instead of a full U × U matrix.
    pub shared_decay: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            rel_tol: 1e-6,
            shared_decay: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    /// Training NLL per event at the returned parameters.
    pub final_nll: f64,
    pub iterations: usize,
    pub converged: bool,
    /// NLL per event after each accepted step (entry 0: initial parameters).
    pub trace: Vec<f64>,
}

impl FitDiagnostics {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iteration,nll")?;
        for (i, v) in self.trace.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

struct Packing {
    u: usize,
    shared_decay: bool,
}

impl Packing {
    fn pack(&self, p: &HawkesParams) -> Vec<f64> {
        let mut x: Vec<f64> = p.base.iter().map(|v| v.ln()).collect();
        x.extend(p.excitation.iter().flatten().map(|v| v.ln()));
        if self.shared_decay {
            let n = (self.u * self.u) as f64;
            x.push(p.decay.iter().flatten().map(|v| v.ln()).sum::<f64>() / n);
        } else {
            x.extend(p.decay.iter().flatten().map(|v| v.ln()));
        }
        x
    }

    fn unpack(&self, x: &[f64]) -> HawkesParams {
        let u = self.u;
        let base = x[..u].iter().map(|v| v.exp()).collect();
        let excitation = (0..u)
            .map(|r| x[u + r * u..u + (r + 1) * u].iter().map(|v| v.exp()).collect())
            .collect();
        let off = u + u * u;
        let decay = (0..u)
            .map(|r| {
                (0..u)
                    .map(|c| {
                        if self.shared_decay {
                            x[off].exp()
                        } else {
                            x[off + r * u + c].exp()
                        }
                    })
                    .collect()
            })
            .collect();
        HawkesParams {
            base,
            excitation,
            decay,
        }
    }

    fn pack_grad(&self, g: &LogParamGradient) -> Vec<f64> {
        let mut x = g.base.clone();
        x.extend(g.excitation.iter().flatten());
        if self.shared_decay {
            x.push(g.decay.iter().flatten().sum());
        } else {
            x.extend(g.decay.iter().flatten());
        }
        x
    }
}

/// Maximum-likelihood fit over the training split (or every sequence when the
/// dataset carries no split labels). Optimises the per-event NLL in
/// log-parameter space with L-BFGS.
pub fn hp_fit(
    dataset: &Dataset,
    init: &HawkesParams,
    opts: &FitOptions,
) -> Result<(HawkesParams, FitDiagnostics)> {
    init.validate()?;
    if init.num_types() != dataset.num_types {
        return Err(Error::invalid("initial parameters do not match the dataset's type count"));
    }
    // zero entries are a fixed point in log space
    if init.base.iter().chain(init.excitation.iter().flatten()).any(|v| *v <= 0.0) {
        return Err(Error::invalid("initial base and excitation must be strictly positive"));
    }
    let train: Vec<&Sequence> = match dataset.splits {
        Some(_) => dataset.split(Split::Train),
        None => dataset.sequences.iter().collect(),
    };
    let n_events: usize = train.iter().map(|s| s.len()).sum();
    if train.is_empty() || n_events == 0 {
        return Err(Error::invalid("empty training split"));
    }
    let scale = 1.0 / n_events as f64;
    let packing = Packing {
        u: dataset.num_types,
        shared_decay: opts.shared_decay,
    };

    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let params = packing.unpack(x);
        let parts = train
            .par_iter()
            .map(|s| hp_loglik_grad(&params, s))
            .collect::<Result<Vec<_>>>()?;
        let mut ll = 0.0;
        let mut grad = LogParamGradient::zeros(packing.u);
        for (l, g) in &parts {
            ll += l;
            grad.add(g);
        }
        let g = packing.pack_grad(&grad).iter().map(|v| -v * scale).collect();
        Ok((-ll * scale, g))
    };

    let result = optim::minimize(
        objective,
        packing.pack(init),
        &LbfgsOptions {
            max_iterations: opts.max_iterations,
            rel_tol: opts.rel_tol,
            ..Default::default()
        },
    )?;
    if !result.value.is_finite() {
        return Err(Error::numeric("non-finite loss during fitting"));
    }
    Ok((
        packing.unpack(&result.x),
        FitDiagnostics {
            final_nll: result.value,
            iterations: result.iterations,
            converged: result.converged,
            trace: result.trace,
        },
    ))
}

/// Excitation state after a prefix: λ_u(t) = μ_u + Σ_v α_uv S_uv exp(-γ_uv (t - start)).
#[derive(Debug, Clone)]
pub struct HawkesInterval {
    start: f64,
    base: Vec<f64>,
    /// α_uv · S_uv at `start`.
    weight: Vec<Vec<f64>>,
    decay: Vec<Vec<f64>>,
}

impl IntervalIntensity for HawkesInterval {
    fn num_types(&self) -> usize {
        self.base.len()
    }

    fn start(&self) -> f64 {
        self.start
    }

    fn intensity(&self, u: usize, t: f64) -> f64 {
        let dt = t - self.start;
        self.base[u]
            + self.weight[u]
                .iter()
                .zip(&self.decay[u])
                .map(|(w, g)| w * (-g * dt).exp())
                .sum::<f64>()
    }
}

impl IntensityModel for HawkesParams {
    type Interval = HawkesInterval;

    fn num_types(&self) -> usize {
        self.base.len()
    }

    fn intervals(&self, events: &[Event]) -> Result<Vec<HawkesInterval>> {
        let u_n = self.num_types();
        let mut s: Vec<Vec<f64>> = vec![vec![0.0; u_n]; u_n];
        let mut prev_time: Option<f64> = None;
        let mut out = Vec::with_capacity(events.len());
        for e in events {
            if let Some(tp) = prev_time {
                let dt = e.time - tp;
                for (u, row) in s.iter_mut().enumerate() {
                    for (v, x) in row.iter_mut().enumerate() {
                        *x *= (-self.decay[u][v] * dt).exp();
                    }
                }
            }
            for row in s.iter_mut() {
                row[e.type_id] += 1.0;
            }
            prev_time = Some(e.time);
            out.push(HawkesInterval {
                start: e.time,
                base: self.base.clone(),
                weight: (0..u_n)
                    .map(|u| (0..u_n).map(|v| self.excitation[u][v] * s[u][v]).collect())
                    .collect(),
                decay: self.decay.clone(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn one_type(mu: f64, alpha: f64, gamma: f64) -> HawkesParams {
        HawkesParams::uniform(vec![mu], alpha, gamma)
    }

    fn seq(events: &[(usize, f64)], horizon: f64) -> Sequence {
        Sequence::new(events.iter().map(|&(u, t)| Event::new(u, t)).collect(), horizon)
    }

    fn random_params(rng: &mut rng::Rng, u: usize) -> HawkesParams {
        HawkesParams {
            base: (0..u).map(|_| rng.gen_range(0.05..1.0)).collect(),
            excitation: (0..u).map(|_| (0..u).map(|_| rng.gen_range(0.01..0.8)).collect()).collect(),
            decay: (0..u).map(|_| (0..u).map(|_| rng.gen_range(0.2..3.0)).collect()).collect(),
        }
    }

    fn random_seq(rng: &mut rng::Rng, u: usize, n: usize, horizon: f64) -> Sequence {
        let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..horizon)).collect();
        times.sort_by(f64::total_cmp);
        Sequence::new(
            times.into_iter().map(|t| Event::new(rng.gen_range(0..u), t)).collect(),
            horizon,
        )
    }

    #[test]
    fn intensity_examples() {
        let p = one_type(0.5, 0.3, 1.0);
        assert_eq!(hp_intensity(&p, &[], 7.0, 0).unwrap(), 0.5);
        let p = one_type(0.1, 0.2, 1.0);
        let v = hp_intensity(&p, &[Event::new(0, 0.0)], 1.0, 0).unwrap();
        assert!((v - 0.17358).abs() < 1e-5);
        assert!(hp_intensity(&p, &[Event::new(0, 1.0)], 1.0, 0).is_err());
    }

    #[test]
    fn matches_simulator_intensity() {
        use crate::simulator::{true_intensity, HawkesSpec, KernelSpec};
        let mut r = rng::stream_rng(3, "test");
        let p = random_params(&mut r, 2);
        let spec = HawkesSpec {
            num_types: 2,
            base: p.base.clone(),
            kernels: (0..2)
                .map(|u| {
                    (0..2)
                        .map(|v| KernelSpec::Exponential {
                            alpha: p.excitation[u][v],
                            gamma: p.decay[u][v],
                        })
                        .collect()
                })
                .collect(),
        };
        let s = random_seq(&mut r, 2, 12, 10.0);
        for t in [0.3, 2.2, 5.0, 9.9] {
            let h = s.history_before(t);
            for u in 0..2 {
                let a = hp_intensity(&p, h, t, u).unwrap();
                let b = true_intensity(&spec, h, t, u).unwrap();
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn compensator_examples() {
        let p = one_type(0.5, 0.2, 1.0);
        assert_eq!(hp_compensator(&p, &seq(&[], 2.0)), 1.0);
        let p = HawkesParams {
            base: vec![0.0],
            excitation: vec![vec![0.2]],
            decay: vec![vec![1.0]],
        };
        let c = hp_compensator(&p, &seq(&[(0, 0.0)], 1.0));
        assert!((c - 0.2 * (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((c - 0.126424).abs() < 1e-6);
    }

    #[test]
    fn loglik_examples() {
        let p = one_type(1.0, 0.0, 1.0);
        let ll = hp_loglik(&p, &seq(&[(0, 1.0)], 1.0)).unwrap();
        assert!((ll + 1.0).abs() < 1e-15);
        let p = one_type(0.7, 0.4, 2.0);
        assert!((hp_loglik(&p, &seq(&[], 3.0)).unwrap() + 2.1).abs() < 1e-12);
        let p = one_type(0.0, 0.4, 2.0);
        assert!(matches!(
            hp_loglik(&p, &seq(&[(0, 1.0)], 2.0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn window_loglik_drops_first_event() {
        let mut r = rng::stream_rng(9, "test");
        let p = random_params(&mut r, 2);
        let s = random_seq(&mut r, 2, 10, 8.0);
        let full = hp_loglik(&p, &s).unwrap();
        let first = s.events[0];
        let mu_total: f64 = p.base.iter().sum();
        let expect = full - p.base[first.type_id].ln() + mu_total * first.time;
        assert!((hp_window_loglik(&p, &s).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn log_gradient_matches_central_differences() {
        let mut r = rng::stream_rng(17, "test");
        for _ in 0..20 {
            let p = random_params(&mut r, 2);
            let s = random_seq(&mut r, 2, 15, 10.0);
            let (_, g) = hp_loglik_grad(&p, &s).unwrap();
            let packing = Packing {
                u: 2,
                shared_decay: false,
            };
            let x = packing.pack(&p);
            let gx = packing.pack_grad(&g);
            for k in 0..x.len() {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fp = hp_loglik(&packing.unpack(&xp), &s).unwrap();
                let fm = hp_loglik(&packing.unpack(&xm), &s).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - gx[k]).abs() / fd.abs().max(gx[k].abs()).max(1e-3);
                assert!(rel < 1e-6, "component {k}: fd {fd} vs analytic {}", gx[k]);
            }
        }
    }

    #[test]
    fn interval_model_reproduces_intensity() {
        let mut r = rng::stream_rng(21, "test");
        let p = random_params(&mut r, 3);
        let s = random_seq(&mut r, 3, 9, 6.0);
        let intervals = p.intervals(&s.events).unwrap();
        for (i, iv) in intervals.iter().enumerate() {
            let t = iv.start() + 0.37;
            for u in 0..3 {
                let direct = p.unchecked_intensity(&s.events[..=i], t, u);
                assert!((iv.intensity(u, t) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_rejects_bad_init() {
        let ds = Dataset::new(1, vec![seq(&[(0, 1.0)], 2.0)]).unwrap();
        let mut init = one_type(0.5, 0.1, 1.0);
        init.decay[0][0] = 0.0;
        assert!(hp_fit(&ds, &init, &FitOptions::default()).is_err());
        let empty = Dataset::new(1, vec![seq(&[], 2.0)]).unwrap();
        assert!(hp_fit(&empty, &one_type(0.5, 0.1, 1.0), &FitOptions::default()).is_err());
    }
}
