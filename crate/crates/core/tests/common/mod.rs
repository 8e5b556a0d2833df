//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::Rng;
use sahp_core::data::{Event, Sequence};
use sahp_core::model::{SahpConfig, SahpModel};
use sahp_core::rng;
use sahp_core::training::{sequence_gradient, states_nll, McSamples};

/// Largest per-tensor relative error `‖g - fd‖ / max(‖g‖, ‖fd‖)` between the
/// analytic gradient and central differences with step `h`, together with
/// the name of the tensor where it occurs.
pub fn gradient_fd_error(model: &SahpModel, seq: &Sequence, samples: &McSamples, h: f64) -> (f64, String) {
    let (_, grads) = sequence_gradient(model, seq, samples, None).unwrap();
    let names: Vec<String> = model.params.trainable().into_iter().map(|(n, _)| n).collect();
    let base = model.params.flatten();
    let nll_at = |x: &[f64]| {
        let mut m = model.clone();
        m.params.assign_flat(x);
        let states = m.sequence_states(&seq.events).unwrap();
        states_nll(&states, seq, samples).unwrap().0
    };
    let mut worst = (0.0, String::new());
    let mut off = 0;
    for (name, g) in names.iter().zip(&grads) {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut f2 = 0.0;
        for (k, a) in g.data().iter().enumerate() {
            let mut xp = base.clone();
            let mut xm = base.clone();
            xp[off + k] += h;
            xm[off + k] -= h;
            let fd = (nll_at(&xp) - nll_at(&xm)) / (2.0 * h);
            diff2 += (a - fd) * (a - fd);
            a2 += a * a;
            f2 += fd * fd;
        }
        off += g.data().len();
        let denom = a2.sqrt().max(f2.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}

/// Random toy sequence of `n` events over `types` types on `[0, horizon]`.
pub fn toy_sequence(r: &mut rng::Rng, n: usize, types: usize, horizon: f64) -> Sequence {
    let mut times: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..horizon)).collect();
    times.sort_by(f64::total_cmp);
    let events = times.into_iter().map(|t| Event::new(r.gen_range(0..types), t)).collect();
    Sequence::new(events, horizon)
}

pub fn gradient_gate_draw(draw: u64) -> (f64, String) {
    let mut config = SahpConfig::new(2, 8, 2, 2);
    config.dropout = 0.0;
    let model = SahpModel::init(config, 1000 + draw).unwrap();
    let mut r = rng::indexed_rng(7, "gradient-gate", draw);
    let seq = toy_sequence(&mut r, 3, 2, 4.0);
    let samples = McSamples::stratified(seq.len(), 10, &mut r).unwrap();
    gradient_fd_error(&model, &seq, &samples, 1e-5)
}
