//! Self-attentive Hawkes model: type embeddings plus a time-shifted sinusoidal
//! position code feed a causally masked multi-head attention encoder, whose
//! per-type outputs parameterise an exponentially relaxing intensity.

mod checkpoint;
mod encoding;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use encoding::{conventional_encoding, frequencies, positional_encoding};
pub use network::{
    all_type_intensity_states, embed_event, encode_history, Forward, SahpModel, SequenceStates,
};
pub use params::{LayerParams, ModelParams};

use serde::{Deserialize, Serialize};

use crate::autodiff::softplus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    #[default]
    TimeShifted,
    /// Index-only sinusoidal code; timestamps do not enter the encoder.
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SahpConfig {
    pub num_types: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub encoding_mode: EncodingMode,
    /// Divide attention logits by the square root of the head width.
    #[serde(default)]
    pub similarity_scaling: bool,
    /// Multiplier `s` in `λ = s·softplus(..)`. The gelu heads keep the
    /// softplus argument above about -0.17, so with `s = 1` no intensity can
    /// fall below about 0.61; smaller values suit data with lower event rates.
    #[serde(default = "one")]
    pub intensity_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl SahpConfig {
    pub fn new(num_types: usize, model_dim: usize, num_heads: usize, num_layers: usize) -> Self {
        Self {
            num_types,
            model_dim,
            num_heads,
            num_layers,
            dropout: 0.1,
            encoding_mode: EncodingMode::TimeShifted,
            similarity_scaling: false,
            intensity_scale: 1.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 {
            return Err(Error::invalid("num_types must be at least 1"));
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "model_dim must be a positive even number, got {}",
                self.model_dim
            )));
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "num_heads {} must divide model_dim {}",
                self.num_heads, self.model_dim
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.intensity_scale > 0.0 && self.intensity_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "intensity_scale must be positive, got {}",
                self.intensity_scale
            )));
        }
        Ok(())
    }
}

/// Parameters of one type's intensity between event `i` and the next event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityState {
    pub mu: f64,
    pub eta: f64,
    pub gamma: f64,
    pub interval_start: f64,
    /// Output multiplier, 1 for the plain softplus form.
    #[serde(default = "one")]
    pub scale: f64,
}

impl IntensityState {
    /// Pre-activation `mu + (eta - mu)·exp(-gamma·(t - t_i))`.
    pub fn activation(&self, t: f64) -> f64 {
        self.mu + (self.eta - self.mu) * (-self.gamma * (t - self.interval_start)).exp()
    }

    /// Intensity at `t`; callers guarantee `t ≥ interval_start`.
    pub fn eval(&self, t: f64) -> f64 {
        self.scale * softplus(self.activation(t))
    }
}

/// `scale·softplus(mu + (eta - mu)·exp(-gamma·(t - t_i)))`.
pub fn intensity_at(state: &IntensityState, t: f64) -> Result<f64> {
    if !(t >= state.interval_start) {
        return Err(Error::invalid(format!(
            "time {t} precedes interval start {}",
            state.interval_start
        )));
    }
    Ok(state.eval(t))
}

/// Intensity heads applied to a hidden vector: gelu, gelu and softplus
/// projections onto `mu`, `eta` and `gamma`.
pub fn intensity_params(params: &ModelParams, config: &SahpConfig, h: &[f64], interval_start: f64) -> IntensityState {
    let dot = |w: &crate::autodiff::Tensor| -> f64 { h.iter().zip(w.data()).map(|(a, b)| a * b).sum() };
    IntensityState {
        mu: crate::autodiff::gelu(dot(&params.head_mu)),
        eta: crate::autodiff::gelu(dot(&params.head_eta)),
        gamma: softplus(dot(&params.head_gamma)),
        interval_start,
        scale: config.intensity_scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(SahpConfig::new(2, 8, 2, 2).validate().is_ok());
        assert!(SahpConfig::new(2, 7, 1, 2).validate().is_err());
        assert!(SahpConfig::new(2, 8, 3, 2).validate().is_err());
        assert!(SahpConfig::new(2, 8, 2, 0).validate().is_err());
        assert!(SahpConfig::new(0, 8, 2, 1).validate().is_err());
        let mut c = SahpConfig::new(2, 8, 2, 1);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn relaxation_shape() {
        let s = IntensityState {
            mu: 0.3,
            eta: 1.5,
            gamma: 0.8,
            interval_start: 2.0,
            scale: 1.0,
        };
        assert_eq!(intensity_at(&s, 2.0).unwrap(), softplus(1.5));
        let far = intensity_at(&s, 2.0 + 50.0 / 0.8).unwrap();
        assert!((far - softplus(0.3)).abs() < 1e-9);
        assert!(intensity_at(&s, 1.9).is_err());

        // inhibition then recovery: increasing when eta < mu
        let inhib = IntensityState { mu: 1.0, eta: -2.0, gamma: 0.5, interval_start: 0.0, scale: 1.0 };
        let vals: Vec<f64> = (0..50).map(|k| inhib.eval(k as f64 * 0.2)).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
        assert!(vals.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn heads_at_zero() {
        let c = SahpConfig::new(2, 8, 2, 1);
        let p = ModelParams::init(&c, 0).unwrap();
        let s = intensity_params(&p, &c, &[0.0; 8], 1.0);
        assert_eq!(s.mu, 0.0);
        assert_eq!(s.eta, 0.0);
        assert!((s.gamma - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
