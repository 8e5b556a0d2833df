mod common;

use sahp_core::data::{split_dataset, Event, Sequence};
use sahp_core::intensity::{ConstantRates, IntensityModel, IntervalIntensity};
use sahp_core::model::{SahpConfig, SahpModel};
use sahp_core::rng;
use sahp_core::simulator::{simulate_dataset, HawkesSpec};
use sahp_core::training::{mc_compensator, train, TrainConfig};

fn small_model(seed: u64) -> SahpModel {
    let mut c = SahpConfig::new(2, 8, 2, 2);
    c.intensity_scale = 0.05;
    SahpModel::init(c, seed).unwrap()
}

fn trapezoid<I: IntervalIntensity>(iv: &I, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|k| iv.total(a + h * k as f64)).sum();
    h * (0.5 * iv.total(a) + inner + 0.5 * iv.total(b))
}

#[test]
fn mc_compensator_matches_quadrature() {
    let model = small_model(3);
    let mut r = rng::stream_rng(3, "seq");
    let seq = common::toy_sequence(&mut r, 6, 2, 8.0);
    let ivs = model.intervals(&seq.events).unwrap();
    let mut exact = 0.0;
    for (i, iv) in ivs.iter().enumerate() {
        let end = seq.events.get(i + 1).map_or(seq.horizon, |e| e.time);
        exact += trapezoid(iv, iv.start(), end, 100_000 / ivs.len());
    }
    let a = mc_compensator(&model, &seq, 10_000, &mut rng::stream_rng(1, "mc")).unwrap();
    let b = mc_compensator(&model, &seq, 10_000, &mut rng::stream_rng(2, "mc")).unwrap();
    assert!((a - exact).abs() / exact < 0.01, "{a} vs {exact}");
    assert!((a - b).abs() / exact < 0.005, "{a} vs {b}");
}

#[test]
fn constant_stub_compensator_is_linear_in_length() {
    let stub = ConstantRates { rates: vec![0.7, 0.3] };
    let seq = Sequence::new(vec![Event::new(0, 1.0), Event::new(1, 2.5), Event::new(0, 3.0)], 5.0);
    let doubled = Sequence::new(seq.events.iter().map(|e| Event::new(e.type_id, 2.0 * e.time)).collect(), 10.0);
    for n in [1, 3, 10] {
        let a = mc_compensator(&stub, &seq, n, &mut rng::stream_rng(0, "c")).unwrap();
        let b = mc_compensator(&stub, &doubled, n, &mut rng::stream_rng(0, "c")).unwrap();
        assert!((a - 4.0).abs() < 1e-12);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }
}

fn synthetic(n: usize, seed: u64) -> sahp_core::data::Dataset {
    let raw = simulate_dataset(&HawkesSpec::synthetic_two_type(), 100.0, n, seed).unwrap();
    split_dataset(&raw, (0.8, 0.1, 0.1), seed).unwrap()
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        warmup_steps: 10,
        max_epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_improves_validation_nll() {
    let data = synthetic(200, 1);
    let out = train(small_model(1), &data, &quick(3)).unwrap();
    assert!(out.best_epoch > 0);
    assert!(out.best_val_nll < out.history[0].val_nll_per_event);
    assert_eq!(out.history.len(), out.epochs_run + 1);
}

#[test]
fn infinite_delta_stops_after_patience_plus_one() {
    let data = synthetic(20, 2);
    let cfg = TrainConfig {
        early_stop_delta: f64::INFINITY,
        patience: 2,
        ..quick(50)
    };
    let out = train(small_model(2), &data, &cfg).unwrap();
    assert_eq!(out.epochs_run, 3);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn training_is_deterministic() {
    let data = synthetic(30, 3);
    let a = train(small_model(4), &data, &quick(2)).unwrap();
    let b = train(small_model(4), &data, &quick(2)).unwrap();
    assert_eq!(a.model.params.flatten(), b.model.params.flatten());
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(
            (x.epoch, x.step, x.train_nll_per_event, x.val_nll_per_event, x.learning_rate),
            (y.epoch, y.step, y.train_nll_per_event, y.val_nll_per_event, y.learning_rate)
        );
    }
}
