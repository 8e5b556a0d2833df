use rand::Rng as _;

use super::encoding::frequencies;
use super::SahpConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Per-head projections, each `K × K/H`.
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    /// Mixes the concatenated heads, `K × K`.
    pub output: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `U × K`, one row per event type.
    pub type_embedding: Tensor,
    /// Fixed angular frequencies; not trained.
    pub omega: Vec<f64>,
    /// Trainable time scales `w`, `1 × K`.
    pub time_scale: Tensor,
    pub layers: Vec<LayerParams>,
    /// Head projections, each `K × 1`.
    pub head_mu: Tensor,
    pub head_eta: Tensor,
    pub head_gamma: Tensor,
}

fn xavier(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-a..a)).collect())
}

/// Shapes of the trainable tensors in [`ModelParams::trainable`] order.
fn expected_shapes(config: &SahpConfig) -> Vec<(usize, usize)> {
    let (u, k, dh, ff) = (config.num_types, config.model_dim, config.head_dim(), config.ff_dim());
    let mut out = vec![(u, k), (1, k)];
    for _ in 0..config.num_layers {
        out.extend(std::iter::repeat_n((k, dh), 3 * config.num_heads));
        out.extend([(k, k), (1, k), (1, k), (k, ff), (1, ff), (ff, k), (1, k), (1, k), (1, k)]);
    }
    out.extend([(k, 1), (k, 1), (k, 1)]);
    out
}

impl ModelParams {
    pub fn init(config: &SahpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream_rng(seed, rng::STREAM_INIT);
        let (u, k, dh, ff) = (config.num_types, config.model_dim, config.head_dim(), config.ff_dim());
        let type_embedding = xavier(&mut r, u, k);
        let omega = frequencies(k);
        let time_scale = Tensor::from_vec(1, k, omega.clone());
        let layers = (0..config.num_layers)
            .map(|_| {
                let heads = |r: &mut rng::Rng| (0..config.num_heads).map(|_| xavier(r, k, dh)).collect::<Vec<_>>();
                let query = heads(&mut r);
                let key = heads(&mut r);
                let value = heads(&mut r);
                LayerParams {
                    query,
                    key,
                    value,
                    output: xavier(&mut r, k, k),
                    norm1_gain: Tensor::filled(1, k, 1.0),
                    norm1_bias: Tensor::zeros(1, k),
                    ff_in: xavier(&mut r, k, ff),
                    ff_in_bias: Tensor::zeros(1, ff),
                    ff_out: xavier(&mut r, ff, k),
                    ff_out_bias: Tensor::zeros(1, k),
                    norm2_gain: Tensor::filled(1, k, 1.0),
                    norm2_bias: Tensor::zeros(1, k),
                }
            })
            .collect();
        Ok(Self {
            type_embedding,
            omega,
            time_scale,
            layers,
            head_mu: xavier(&mut r, k, 1),
            head_eta: xavier(&mut r, k, 1),
            head_gamma: xavier(&mut r, k, 1),
        })
    }

    /// Trainable tensors with stable names, in a fixed order shared by
    /// [`ModelParams::trainable_mut`] and the gradient layout.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("type_embedding".into(), &self.type_embedding),
            ("time_scale".into(), &self.time_scale),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, t) in layer.query.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.query"), t));
            }
            for (h, t) in layer.key.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.key"), t));
            }
            for (h, t) in layer.value.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.value"), t));
            }
            out.push((format!("layer{l}.output"), &layer.output));
            out.push((format!("layer{l}.norm1_gain"), &layer.norm1_gain));
            out.push((format!("layer{l}.norm1_bias"), &layer.norm1_bias));
            out.push((format!("layer{l}.ff_in"), &layer.ff_in));
            out.push((format!("layer{l}.ff_in_bias"), &layer.ff_in_bias));
            out.push((format!("layer{l}.ff_out"), &layer.ff_out));
            out.push((format!("layer{l}.ff_out_bias"), &layer.ff_out_bias));
            out.push((format!("layer{l}.norm2_gain"), &layer.norm2_gain));
            out.push((format!("layer{l}.norm2_bias"), &layer.norm2_bias));
        }
        out.push(("head_mu".into(), &self.head_mu));
        out.push(("head_eta".into(), &self.head_eta));
        out.push(("head_gamma".into(), &self.head_gamma));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.type_embedding, &mut self.time_scale];
        for layer in &mut self.layers {
            out.extend(layer.query.iter_mut());
            out.extend(layer.key.iter_mut());
            out.extend(layer.value.iter_mut());
            out.push(&mut layer.output);
            out.push(&mut layer.norm1_gain);
            out.push(&mut layer.norm1_bias);
            out.push(&mut layer.ff_in);
            out.push(&mut layer.ff_in_bias);
            out.push(&mut layer.ff_out);
            out.push(&mut layer.ff_out_bias);
            out.push(&mut layer.norm2_gain);
            out.push(&mut layer.norm2_bias);
        }
        out.push(&mut self.head_mu);
        out.push(&mut self.head_eta);
        out.push(&mut self.head_gamma);
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// All trainable values concatenated in [`ModelParams::trainable`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.trainable().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in self.trainable_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    /// Checks shapes against `config` and that every entry is finite.
    pub fn validate(&self, config: &SahpConfig) -> Result<()> {
        config.validate()?;
        let k = config.model_dim;
        let expect = |name: &str, t: &Tensor, shape: (usize, usize)| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        if self.layers.len() != config.num_layers {
            return Err(Error::invalid(format!(
                "checkpoint has {} layers, config expects {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        if self.omega.len() != k {
            return Err(Error::invalid("omega length differs from model_dim"));
        }
        for layer in &self.layers {
            if layer.query.len() != config.num_heads
                || layer.key.len() != config.num_heads
                || layer.value.len() != config.num_heads
            {
                return Err(Error::invalid("head count differs from config"));
            }
        }
        for ((name, t), shape) in self.trainable().into_iter().zip(expected_shapes(config)) {
            expect(&name, t, shape)?;
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("parameter {name} has non-finite entries")));
            }
        }
        Ok(())
    }
}
