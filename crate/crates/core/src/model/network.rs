//! Encoder forward pass recorded on an autodiff tape.
//!
//! Two row streams run through the layers. History rows (one per event) attend
//! causally to themselves and earlier events. Query rows, one per (prefix,
//! type) pair, attend to the history rows of their prefix; the last layer's
//! query rows are the hidden vectors fed to the intensity heads. Only the
//! first `L - 1` layers of the history stream are needed.

use rand::Rng as _;

use super::encoding::{conventional_encoding, positional_encoding};
use super::{intensity_params, EncodingMode, IntensityState, ModelParams, SahpConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Event;
use crate::error::{Error, Result};
use crate::intensity::{IntensityModel, IntervalIntensity};
use crate::rng;

struct LayerVars {
    query: Vec<Var>,
    key: Vec<Var>,
    value: Vec<Var>,
    output: Var,
    norm1_gain: Var,
    norm1_bias: Var,
    ff_in: Var,
    ff_in_bias: Var,
    ff_out: Var,
    ff_out_bias: Var,
    norm2_gain: Var,
    norm2_bias: Var,
}

struct ParamVars {
    type_embedding: Var,
    time_scale: Var,
    layers: Vec<LayerVars>,
    head_mu: Var,
    head_eta: Var,
    head_gamma: Var,
}

impl ParamVars {
    fn record(tape: &mut Tape, p: &ModelParams) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone());
        let type_embedding = leaf(&p.type_embedding);
        let time_scale = leaf(&p.time_scale);
        let layers = p
            .layers
            .iter()
            .map(|l| LayerVars {
                query: l.query.iter().map(&mut leaf).collect(),
                key: l.key.iter().map(&mut leaf).collect(),
                value: l.value.iter().map(&mut leaf).collect(),
                output: leaf(&l.output),
                norm1_gain: leaf(&l.norm1_gain),
                norm1_bias: leaf(&l.norm1_bias),
                ff_in: leaf(&l.ff_in),
                ff_in_bias: leaf(&l.ff_in_bias),
                ff_out: leaf(&l.ff_out),
                ff_out_bias: leaf(&l.ff_out_bias),
                norm2_gain: leaf(&l.norm2_gain),
                norm2_bias: leaf(&l.norm2_bias),
            })
            .collect();
        Self {
            type_embedding,
            time_scale,
            layers,
            head_mu: leaf(&p.head_mu),
            head_eta: leaf(&p.head_eta),
            head_gamma: leaf(&p.head_gamma),
        }
    }

    /// Leaves in [`ModelParams::trainable`] order.
    fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.type_embedding, self.time_scale];
        for l in &self.layers {
            out.extend(&l.query);
            out.extend(&l.key);
            out.extend(&l.value);
            out.extend([
                l.output,
                l.norm1_gain,
                l.norm1_bias,
                l.ff_in,
                l.ff_in_bias,
                l.ff_out,
                l.ff_out_bias,
                l.norm2_gain,
                l.norm2_bias,
            ]);
        }
        out.extend([self.head_mu, self.head_eta, self.head_gamma]);
        out
    }
}

/// Initial query rows and how many history rows each may attend to.
enum Queries {
    PerType,
    Explicit { rows: Tensor, lens: Vec<usize> },
}

struct Encoded {
    tape: Tape,
    vars: ParamVars,
    hidden: Var,
    /// Query-stream attention weights, indexed `[layer][head]`.
    attention: Vec<Vec<Var>>,
}

struct Builder<'a> {
    config: &'a SahpConfig,
    dropout: Option<&'a mut rng::Rng>,
}

impl Builder<'_> {
    fn dropout_mask(&mut self, rows: usize, cols: usize) -> Option<Tensor> {
        let p = self.config.dropout;
        let r = self.dropout.as_mut()?;
        if p == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some(Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| if r.gen::<f64>() < p { 0.0 } else { keep }).collect(),
        ))
    }

    fn maybe_drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        let (rows, cols) = tape.value(x).shape();
        match self.dropout_mask(rows, cols) {
            Some(mask) => tape.mul_const(x, mask),
            None => x,
        }
    }

    /// One encoder layer for `input` rows attending to precomputed per-head
    /// keys and values. Returns the output rows and per-head attention weights.
    fn block(
        &mut self,
        tape: &mut Tape,
        layer: &LayerVars,
        input: Var,
        keys: &[Var],
        values: &[Var],
        lens: &[usize],
    ) -> (Var, Vec<Var>) {
        let mut heads = Vec::with_capacity(keys.len());
        let mut weights = Vec::with_capacity(keys.len());
        for h in 0..keys.len() {
            let q = tape.matmul(input, layer.query[h]);
            let mut scores = tape.matmul_t(q, keys[h]);
            if self.config.similarity_scaling {
                scores = tape.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt());
            }
            let attn = tape.prefix_softmax(scores, lens.to_vec());
            weights.push(attn);
            let attn = self.maybe_drop(tape, attn);
            heads.push(tape.matmul(attn, values[h]));
        }
        let concat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(heads) };
        let mixed = tape.matmul(concat, layer.output);
        let res1 = tape.add(input, mixed);
        let y = tape.layer_norm(res1, layer.norm1_gain, layer.norm1_bias);
        let ff = tape.matmul(y, layer.ff_in);
        let ff = tape.add_row(ff, layer.ff_in_bias);
        let ff = tape.gelu(ff);
        let ff = tape.matmul(ff, layer.ff_out);
        let ff = tape.add_row(ff, layer.ff_out_bias);
        let ff = self.maybe_drop(tape, ff);
        let res2 = tape.add(y, ff);
        (tape.layer_norm(res2, layer.norm2_gain, layer.norm2_bias), weights)
    }
}

/// Position code rows for (position, time) pairs, on the tape.
fn encoding_rows(
    tape: &mut Tape,
    params: &ModelParams,
    mode: EncodingMode,
    time_scale: Var,
    positions: &[f64],
    times: &[f64],
) -> Var {
    let k = params.omega.len();
    match mode {
        EncodingMode::Conventional => {
            let data = positions.iter().flat_map(|p| conventional_encoding(&params.omega, *p)).collect();
            tape.leaf(Tensor::from_vec(positions.len(), k, data))
        }
        EncodingMode::TimeShifted => {
            let base = positions
                .iter()
                .flat_map(|p| params.omega.iter().map(move |w| w * p))
                .collect();
            tape.sinusoid(Tensor::from_vec(positions.len(), k, base), time_scale, times.to_vec())
        }
    }
}

fn check_events(config: &SahpConfig, events: &[Event]) -> Result<()> {
    if events.is_empty() {
        return Err(Error::invalid("history prefix is empty"));
    }
    for (i, e) in events.iter().enumerate() {
        if e.type_id >= config.num_types {
            return Err(Error::invalid(format!(
                "event {i} has type {} but the model has {} types",
                e.type_id, config.num_types
            )));
        }
    }
    Ok(())
}

fn encode(
    params: &ModelParams,
    config: &SahpConfig,
    events: &[Event],
    queries: Queries,
    dropout: Option<&mut rng::Rng>,
) -> Result<Encoded> {
    check_events(config, events)?;
    let n = events.len();
    let u = config.num_types;
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, params);

    let types: Vec<usize> = events.iter().map(|e| e.type_id).collect();
    let times: Vec<f64> = events.iter().map(|e| e.time).collect();
    let positions: Vec<f64> = (1..=n).map(|p| p as f64).collect();
    let tp = tape.gather_rows(vars.type_embedding, types);
    let pe = encoding_rows(&mut tape, params, config.encoding_mode, vars.time_scale, &positions, &times);
    let mut history = tape.add(tp, pe);
    let history_lens: Vec<usize> = (1..=n).collect();

    let (mut query, query_lens) = match queries {
        Queries::PerType => {
            let q_types: Vec<usize> = (0..n).flat_map(|_| 0..u).collect();
            let q_pos: Vec<f64> = (0..n).flat_map(|i| std::iter::repeat_n((i + 2) as f64, u)).collect();
            let q_times: Vec<f64> = times.iter().flat_map(|t| std::iter::repeat_n(*t, u)).collect();
            let tp = tape.gather_rows(vars.type_embedding, q_types);
            let pe = encoding_rows(&mut tape, params, config.encoding_mode, vars.time_scale, &q_pos, &q_times);
            let lens = (0..n).flat_map(|i| std::iter::repeat_n(i + 1, u)).collect();
            (tape.add(tp, pe), lens)
        }
        Queries::Explicit { rows, lens } => {
            if lens.iter().any(|&l| l == 0 || l > n) {
                return Err(Error::invalid("query attends to an empty or out-of-range prefix"));
            }
            (tape.leaf(rows), lens)
        }
    };

    let mut builder = Builder { config, dropout };
    let mut attention = Vec::with_capacity(config.num_layers);
    for (l, layer) in vars.layers.iter().enumerate() {
        let keys: Vec<Var> = layer.key.iter().map(|w| tape.matmul(history, *w)).collect();
        let values: Vec<Var> = layer.value.iter().map(|w| tape.matmul(history, *w)).collect();
        let (next_query, weights) = builder.block(&mut tape, layer, query, &keys, &values, &query_lens);
        attention.push(weights);
        if l + 1 < config.num_layers {
            history = builder
                .block(&mut tape, layer, history, &keys, &values, &history_lens)
                .0;
        }
        query = next_query;
    }
    Ok(Encoded {
        tape,
        vars,
        hidden: query,
        attention,
    })
}

/// A full per-type forward pass over one sequence, kept for backpropagation.
/// Head outputs are column vectors with row `i·U + u` for the interval after
/// event `i` and type `u`.
pub struct Forward {
    tape: Tape,
    vars: ParamVars,
    pub mu: Var,
    pub eta: Var,
    pub gamma: Var,
    attention: Vec<Vec<Var>>,
    num_types: usize,
    scale: f64,
    times: Vec<f64>,
}

impl Forward {
    /// Runs the encoder. Passing a dropout stream switches on training mode.
    pub fn run(
        params: &ModelParams,
        config: &SahpConfig,
        events: &[Event],
        dropout: Option<&mut rng::Rng>,
    ) -> Result<Self> {
        let enc = encode(params, config, events, Queries::PerType, dropout)?;
        let mut tape = enc.tape;
        let vars = enc.vars;
        let pre_mu = tape.matmul(enc.hidden, vars.head_mu);
        let pre_eta = tape.matmul(enc.hidden, vars.head_eta);
        let pre_gamma = tape.matmul(enc.hidden, vars.head_gamma);
        let mu = tape.gelu(pre_mu);
        let eta = tape.gelu(pre_eta);
        let gamma = tape.softplus(pre_gamma);
        Ok(Self {
            tape,
            vars,
            mu,
            eta,
            gamma,
            attention: enc.attention,
            num_types: config.num_types,
            scale: config.intensity_scale,
            times: events.iter().map(|e| e.time).collect(),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Intensity states, one row of `U` per event.
    pub fn states(&self) -> SequenceStates {
        let (mu, eta, gamma) = (self.value(self.mu), self.value(self.eta), self.value(self.gamma));
        let u = self.num_types;
        self.times
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (0..u)
                    .map(|v| IntensityState {
                        mu: mu.data()[i * u + v],
                        eta: eta.data()[i * u + v],
                        gamma: gamma.data()[i * u + v],
                        interval_start: *t,
                        scale: self.scale,
                    })
                    .collect()
            })
            .collect()
    }

    /// Attention weights of the query rows, indexed `[layer][head]`; each is
    /// `(n·U) × n` with zeros past the row's prefix.
    pub fn attention(&self) -> Vec<Vec<&Tensor>> {
        self.attention
            .iter()
            .map(|layer| layer.iter().map(|v| self.tape.value(*v)).collect())
            .collect()
    }

    /// Gradients of `Σ dmu·mu + Σ deta·eta + Σ dgamma·gamma` with respect to
    /// the trainable tensors, in [`ModelParams::trainable`] order.
    pub fn backward(&self, dmu: Tensor, deta: Tensor, dgamma: Tensor) -> Vec<Tensor> {
        let mut grads = self
            .tape
            .backward(vec![(self.mu, dmu), (self.eta, deta), (self.gamma, dgamma)]);
        self.vars
            .ordered()
            .into_iter()
            .map(|v| {
                grads.take(v).unwrap_or_else(|| {
                    let (r, c) = self.tape.value(v).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}

/// Per-event rows of per-type intensity states.
pub type SequenceStates = Vec<Vec<IntensityState>>;

/// Type embedding row plus position code.
pub fn embed_event(
    params: &ModelParams,
    config: &SahpConfig,
    type_id: usize,
    position: f64,
    t: f64,
) -> Result<Vec<f64>> {
    if type_id >= config.num_types {
        return Err(Error::invalid(format!(
            "type {type_id} out of range for {} types",
            config.num_types
        )));
    }
    let pe = positional_encoding(params, config.encoding_mode, position, t);
    Ok(params.type_embedding.row(type_id).iter().zip(pe).map(|(a, b)| a + b).collect())
}

/// Hidden vector for an arbitrary query attending over `prefix` (evaluation mode).
pub fn encode_history(
    params: &ModelParams,
    config: &SahpConfig,
    prefix: &[Event],
    query: &[f64],
) -> Result<Vec<f64>> {
    if query.len() != config.model_dim {
        return Err(Error::invalid("query length differs from model_dim"));
    }
    let rows = Tensor::from_vec(1, query.len(), query.to_vec());
    let enc = encode(
        params,
        config,
        prefix,
        Queries::Explicit {
            rows,
            lens: vec![prefix.len()],
        },
        None,
    )?;
    Ok(enc.tape.value(enc.hidden).row(0).to_vec())
}

/// States of every type for the interval after the last event of `prefix`.
pub fn all_type_intensity_states(
    params: &ModelParams,
    config: &SahpConfig,
    prefix: &[Event],
) -> Result<Vec<IntensityState>> {
    let last = prefix.last().ok_or_else(|| Error::invalid("history prefix is empty"))?;
    let u = config.num_types;
    let n = prefix.len();
    let rows = (0..u)
        .map(|v| embed_event(params, config, v, (n + 1) as f64, last.time))
        .collect::<Result<Vec<_>>>()?;
    let rows = Tensor::from_vec(u, config.model_dim, rows.concat());
    let enc = encode(
        params,
        config,
        prefix,
        Queries::Explicit {
            rows,
            lens: vec![n; u],
        },
        None,
    )?;
    let hidden = enc.tape.value(enc.hidden);
    Ok((0..u)
        .map(|v| intensity_params(params, config, hidden.row(v), last.time))
        .collect())
}

/// Parameters and configuration bundled as an [`IntensityModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SahpModel {
    pub config: SahpConfig,
    pub params: ModelParams,
}

impl SahpModel {
    pub fn new(config: SahpConfig, params: ModelParams) -> Result<Self> {
        params.validate(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: SahpConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Evaluation-mode forward pass over a whole sequence.
    pub fn forward(&self, events: &[Event]) -> Result<Forward> {
        Forward::run(&self.params, &self.config, events, None)
    }

    pub fn sequence_states(&self, events: &[Event]) -> Result<SequenceStates> {
        Ok(self.forward(events)?.states())
    }
}

/// Intensities of every type on one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeStates {
    pub states: Vec<IntensityState>,
}

impl IntervalIntensity for TypeStates {
    fn num_types(&self) -> usize {
        self.states.len()
    }

    fn start(&self) -> f64 {
        self.states[0].interval_start
    }

    fn intensity(&self, u: usize, t: f64) -> f64 {
        self.states[u].eval(t)
    }
}

impl IntensityModel for SahpModel {
    type Interval = TypeStates;

    fn num_types(&self) -> usize {
        self.config.num_types
    }

    fn intervals(&self, events: &[Event]) -> Result<Vec<TypeStates>> {
        if events.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self
            .sequence_states(events)?
            .into_iter()
            .map(|states| TypeStates { states })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(spec: &[(usize, f64)]) -> Vec<Event> {
        spec.iter().map(|&(type_id, time)| Event { type_id, time }).collect()
    }

    fn model(u: usize, k: usize, h: usize, l: usize, seed: u64) -> SahpModel {
        SahpModel::init(SahpConfig::new(u, k, h, l), seed).unwrap()
    }

    #[test]
    fn per_type_states_match_prefix_evaluation() {
        let m = model(3, 8, 2, 2, 11);
        let ev = events(&[(0, 0.3), (2, 1.1), (1, 1.5), (0, 2.9)]);
        let full = m.sequence_states(&ev).unwrap();
        for i in 0..ev.len() {
            let single = all_type_intensity_states(&m.params, &m.config, &ev[..=i]).unwrap();
            for (a, b) in full[i].iter().zip(&single) {
                assert_eq!(a, b, "prefix {i}");
            }
        }
    }

    #[test]
    fn single_event_attention_ignores_query() {
        // one layer, one head: the attention sublayer sees exactly one value row
        let m = model(2, 8, 1, 1, 5);
        let ev = events(&[(1, 0.7)]);
        let e = embed_event(&m.params, &m.config, 1, 1.0, 0.7).unwrap();
        let v = Tensor::from_vec(1, 8, e).matmul(&m.params.layers[0].value[0]);
        let mixed = v.matmul(&m.params.layers[0].output);
        for q in [[0.0; 8], [3.0; 8]] {
            let mut qq = q.to_vec();
            qq[0] = -1.5;
            let h = encode_history(&m.params, &m.config, &ev, &qq).unwrap();
            // recompute the block by hand from the attention output
            let layer = &m.params.layers[0];
            let mut tape = Tape::new();
            let inp = tape.leaf(Tensor::from_vec(1, 8, qq.clone()));
            let a = tape.leaf(mixed.clone());
            let r = tape.add(inp, a);
            let g1 = tape.leaf(layer.norm1_gain.clone());
            let b1 = tape.leaf(layer.norm1_bias.clone());
            let y = tape.layer_norm(r, g1, b1);
            let w1 = tape.leaf(layer.ff_in.clone());
            let bb1 = tape.leaf(layer.ff_in_bias.clone());
            let w2 = tape.leaf(layer.ff_out.clone());
            let bb2 = tape.leaf(layer.ff_out_bias.clone());
            let f = tape.matmul(y, w1);
            let f = tape.add_row(f, bb1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, bb2);
            let r2 = tape.add(y, f);
            let g2 = tape.leaf(layer.norm2_gain.clone());
            let b2 = tape.leaf(layer.norm2_bias.clone());
            let out = tape.layer_norm(r2, g2, b2);
            let expect = tape.value(out).row(0).to_vec();
            for (x, y) in h.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = model(2, 8, 2, 2, 3);
        let ev = events(&[(0, 0.1), (1, 0.4), (1, 2.0), (0, 2.2), (1, 3.9)]);
        let f = m.forward(&ev).unwrap();
        for layer in f.attention() {
            for w in layer {
                for r in 0..w.rows() {
                    let prefix = r / 2 + 1;
                    let row = w.row(r);
                    assert!(row.iter().all(|x| *x >= 0.0));
                    assert!(row[prefix..].iter().all(|x| *x == 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let m = model(2, 8, 2, 1, 0);
        assert!(m.sequence_states(&[]).is_err());
        assert!(m.sequence_states(&events(&[(2, 0.1)])).is_err());
        assert!(embed_event(&m.params, &m.config, 5, 1.0, 0.0).is_err());
    }
}
