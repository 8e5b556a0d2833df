//! Sinusoidal position codes. Dimension `k` uses angular frequency
//! `ω_k = 10000^(-2⌊k/2⌋/K)`; even dimensions take the sine, odd the cosine.

use super::{EncodingMode, ModelParams};

pub fn frequencies(model_dim: usize) -> Vec<f64> {
    (0..model_dim)
        .map(|k| 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / model_dim as f64))
        .collect()
}

fn wave(k: usize, phase: f64) -> f64 {
    if k.is_multiple_of(2) {
        phase.sin()
    } else {
        phase.cos()
    }
}

/// Index-only code at a (possibly fractional) position.
pub fn conventional_encoding(omega: &[f64], position: f64) -> Vec<f64> {
    omega.iter().enumerate().map(|(k, w)| wave(k, w * position)).collect()
}

/// Code for an event at `position` and time `t`: phase `ω_k·i + w_k·t`, or
/// `ω_k·i` alone in conventional mode.
pub fn positional_encoding(params: &ModelParams, mode: EncodingMode, position: f64, t: f64) -> Vec<f64> {
    match mode {
        EncodingMode::Conventional => conventional_encoding(&params.omega, position),
        EncodingMode::TimeShifted => params
            .omega
            .iter()
            .zip(params.time_scale.data())
            .enumerate()
            .map(|(k, (om, w))| wave(k, om * position + w * t))
            .collect(),
    }
}
