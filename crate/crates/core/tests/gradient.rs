mod common;

use sahp_core::model::{EncodingMode, SahpConfig, SahpModel};
use sahp_core::rng;
use sahp_core::training::{sequence_gradient, states_nll, McSamples};

#[test]
fn gradient_matches_finite_differences() {
    for draw in 0..5 {
        let (err, name) = common::gradient_gate_draw(draw);
        assert!(err < 1e-4, "draw {draw}: relative error {err:e} in {name}");
    }
}

#[test]
fn gradient_variants_match_finite_differences() {
    let mut r = rng::stream_rng(3, "variants");
    for (mode, scaling, u, heads, layers) in [
        (EncodingMode::Conventional, false, 3, 1, 1),
        (EncodingMode::TimeShifted, true, 2, 4, 3),
        (EncodingMode::TimeShifted, false, 1, 2, 1),
    ] {
        let mut config = SahpConfig::new(u, 8, heads, layers);
        config.dropout = 0.0;
        config.encoding_mode = mode;
        config.similarity_scaling = scaling;
        let model = SahpModel::init(config, 21).unwrap();
        let seq = common::toy_sequence(&mut r, 6, u, 5.0);
        let samples = McSamples::stratified(seq.len(), 4, &mut r).unwrap();
        let (err, name) = common::gradient_fd_error(&model, &seq, &samples, 1e-5);
        assert!(err < 1e-4, "{mode:?}/{scaling}: relative error {err:e} in {name}");
    }
}

#[test]
fn dropout_gradient_is_exact_for_fixed_masks() {
    let mut config = SahpConfig::new(2, 8, 2, 2);
    config.dropout = 0.3;
    let model = SahpModel::init(config, 5).unwrap();
    let mut r = rng::stream_rng(4, "dropout");
    let seq = common::toy_sequence(&mut r, 5, 2, 4.0);
    let samples = McSamples::stratified(seq.len(), 3, &mut r).unwrap();
    let nll = |m: &SahpModel| {
        let mut d = rng::stream_rng(9, rng::STREAM_DROPOUT);
        sequence_gradient(m, &seq, &samples, Some(&mut d)).unwrap()
    };
    let (_, grads) = nll(&model);
    let base = model.params.flatten();
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    for k in (0..base.len()).step_by(37) {
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut x = base.clone();
            x[k] += delta;
            m.params.assign_flat(&x);
            nll(&m).0.nll
        };
        let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
        assert!((fd - flat[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", flat[k]);
    }
    // masks actually change the result
    let (eval_mode, _) = sequence_gradient(&model, &seq, &samples, None).unwrap();
    assert_ne!(eval_mode.nll, nll(&model).0.nll);
}

#[test]
fn fixed_frequencies_are_not_trainable() {
    let model = SahpModel::init(SahpConfig::new(2, 8, 2, 2), 0).unwrap();
    let names: Vec<String> = model.params.trainable().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| !n.contains("omega")));
    assert!(names.iter().any(|n| n == "time_scale"));
}

#[test]
fn compensator_gradient_reaches_type_embedding() {
    let mut config = SahpConfig::new(2, 8, 2, 2);
    config.dropout = 0.0;
    let model = SahpModel::init(config, 2).unwrap();
    let mut r = rng::stream_rng(6, "comp");
    // a single event: the NLL is the compensator alone
    let seq = common::toy_sequence(&mut r, 1, 2, 3.0);
    let samples = McSamples::stratified(seq.len(), 10, &mut r).unwrap();
    let states = model.sequence_states(&seq.events).unwrap();
    let (comp, _) = states_nll(&states, &seq, &samples).unwrap();
    assert!(comp > 0.0);
    let (_, grads) = sequence_gradient(&model, &seq, &samples, None).unwrap();
    assert!(grads[0].data().iter().any(|g| *g != 0.0));
}
