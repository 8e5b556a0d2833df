//! Limited-memory BFGS with Armijo backtracking, used for the classic Hawkes
//! baseline. Only accepted steps are recorded, and every accepted step strictly
//! decreases the objective.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    /// Stop when `(f_old - f_new) / max(|f_old|, 1) < rel_tol`.
    pub rel_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            rel_tol: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step; entry 0 is the starting value.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("objective not finite at the starting point"));
    }
    let mut trace = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let scale = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / dot(&g, &g).sqrt().max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= scale);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            let norm = dot(&g, &g).sqrt().max(1.0);
            dir = g.iter().map(|v| -v / norm).collect();
            slope = dot(&g, &dir);
            if !(slope < 0.0) {
                converged = true;
                break;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if let Ok((fxn, gn)) = f(&xn) {
                if fxn.is_finite()
                    && gn.iter().all(|v| v.is_finite())
                    && fxn <= fx + 1e-4 * step * slope
                    && fxn < fx
                {
                    accepted = Some((xn, fxn, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fxn, gn)) = accepted else {
            // no decrease achievable along the search direction
            converged = true;
            break;
        };
        iterations += 1;

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        let improvement = (fx - fxn) / fx.abs().max(1.0);
        x = xn;
        fx = fxn;
        g = gn;
        trace.push(fx);
        if improvement < opts.rel_tol {
            converged = true;
            break;
        }
    }

    Ok(LbfgsResult {
        x,
        value: fx,
        iterations,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((v, g))
        };
        let opts = LbfgsOptions {
            rel_tol: 1e-14,
            ..Default::default()
        };
        let r = minimize(f, vec![-1.2, 1.0], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1] < w[0]));
    }
}
