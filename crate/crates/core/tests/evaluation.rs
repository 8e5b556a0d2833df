mod common;

use sahp_core::autodiff::softplus;
use sahp_core::classic_hp::HawkesParams;
use sahp_core::data::Event;
use sahp_core::eval::{attention_map, interval_density, predict_interval, QuadratureConfig};
use sahp_core::intensity::{IntensityModel, IntervalIntensity};
use sahp_core::model::{SahpConfig, SahpModel};
use sahp_core::rng;

fn hp() -> HawkesParams {
    HawkesParams {
        base: vec![0.1, 0.25],
        excitation: vec![vec![0.4, 0.1], vec![0.2, 0.3]],
        decay: vec![vec![1.5, 0.5], vec![0.8, 2.0]],
    }
}

fn history() -> Vec<Event> {
    vec![Event::new(0, 0.2), Event::new(1, 0.9), Event::new(0, 1.0)]
}

/// Mean next time and type probabilities by fine trapezoid on a long span.
fn dense_oracle<I: IntervalIntensity>(iv: &I, span: f64, n: usize) -> (f64, Vec<f64>) {
    let h = span / n as f64;
    let u = iv.num_types();
    let mut cum = 0.0;
    let start = iv.start();
    let mut prev_total = iv.total(start);
    let mut prev = (start, prev_total, (0..u).map(|v| iv.intensity(v, start)).collect::<Vec<_>>(), 1.0);
    let mut mean = 0.0;
    let mut scores = vec![0.0; u];
    for k in 1..=n {
        let t = start + h * k as f64;
        let total = iv.total(t);
        cum += 0.5 * h * (prev_total + total);
        let surv = (-cum).exp();
        let lam: Vec<f64> = (0..u).map(|v| iv.intensity(v, t)).collect();
        let (t0, f0, l0, s0) = &prev;
        mean += 0.5 * h * (t0 * f0 * s0 + t * total * surv);
        for v in 0..u {
            scores[v] += 0.5 * h * (l0[v] * s0 + lam[v] * surv);
        }
        prev = (t, total, lam, surv);
        prev_total = total;
    }
    (mean, scores)
}

#[test]
fn hawkes_prediction_matches_dense_quadrature() {
    let ivs = hp().intervals(&history()).unwrap();
    let iv = ivs.last().unwrap();
    // total intensity >= 0.35, so survival at span 200 is below e^-70
    let (mean, scores) = dense_oracle(iv, 200.0, 2_000_000);
    let p = predict_interval(iv, &QuadratureConfig::default()).unwrap();
    assert!((p.predicted_time - mean).abs() / (mean - 1.0) < 1e-3, "{} vs {mean}", p.predicted_time);
    for (a, b) in p.type_scores.iter().zip(&scores) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn refinement_changes_prediction_little() {
    let mut c = SahpConfig::new(2, 8, 2, 2);
    c.intensity_scale = 0.1;
    let m = SahpModel::init(c, 9).unwrap();
    let seq = common::toy_sequence(&mut rng::stream_rng(9, "seq"), 8, 2, 10.0);
    let quad = QuadratureConfig::default();
    for iv in m.intervals(&seq.events).unwrap() {
        let a = predict_interval(&iv, &quad).unwrap();
        let b = predict_interval(&iv, &quad.refined()).unwrap();
        let gap = (a.predicted_time - iv.start()).max(1e-12);
        assert!((a.predicted_time - b.predicted_time).abs() / gap < 1e-4);
    }
}

#[test]
fn density_integrates_to_the_distribution_function() {
    let p = hp();
    let ivs = p.intervals(&history()).unwrap();
    let iv = ivs.last().unwrap();
    let start = iv.start();
    // closed-form survival of the exponential-kernel interval
    let cumulative = |l: f64| {
        let mut c: f64 = p.base.iter().sum::<f64>() * l;
        for u in 0..2 {
            for v in 0..2 {
                let s: f64 = history()
                    .iter()
                    .filter(|e| e.type_id == v)
                    .map(|e| p.excitation[u][v] * (-p.decay[u][v] * (start - e.time)).exp())
                    .sum();
                c += s / p.decay[u][v] * (1.0 - (-p.decay[u][v] * l).exp());
            }
        }
        c
    };
    for l in [0.5, 2.0, 10.0] {
        let n = 2_000;
        let h = l / n as f64;
        let mut integral = 0.0;
        let mut prev = iv.total(start);
        for k in 1..=n {
            let f = interval_density(iv, start + h * k as f64).unwrap();
            integral += 0.5 * h * (prev + f);
            prev = f;
        }
        let want = 1.0 - (-cumulative(l)).exp();
        assert!(integral <= 1.0);
        assert!((integral - want).abs() < 1e-5, "{integral} vs {want}");
    }
}

#[test]
fn density_at_interval_start_is_total_softplus_eta() {
    let m = SahpModel::init(SahpConfig::new(2, 8, 2, 2), 1).unwrap();
    let prefix = history();
    let states = m.sequence_states(&prefix).unwrap();
    let last = states.last().unwrap();
    let want: f64 = last.iter().map(|s| softplus(s.eta)).sum();
    let ivs = m.intervals(&prefix).unwrap();
    let got = interval_density(ivs.last().unwrap(), 1.0 + 1e-12).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn attention_map_is_row_stochastic() {
    let m = SahpModel::init(SahpConfig::new(3, 8, 2, 2), 2).unwrap();
    let seqs: Vec<_> = (0..4)
        .map(|k| common::toy_sequence(&mut rng::indexed_rng(2, "attn", k), 10, 3, 10.0))
        .collect();
    let refs: Vec<_> = seqs.iter().collect();
    let map = attention_map(&m, &refs).unwrap();
    for row in &map.matrix {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let single = SahpModel::init(SahpConfig::new(1, 8, 2, 2), 2).unwrap();
    let seq = common::toy_sequence(&mut rng::stream_rng(3, "attn1"), 10, 1, 10.0);
    assert_eq!(attention_map(&single, &[&seq]).unwrap().matrix, vec![vec![1.0]]);
}
