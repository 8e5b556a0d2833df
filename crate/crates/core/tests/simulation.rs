use proptest::prelude::*;
use sahp_core::classic_hp::{hp_fit, hp_window_loglik, FitOptions, HawkesParams};
use sahp_core::data::validate_sequence;
use sahp_core::rng;
use sahp_core::simulator::{simulate_dataset, simulate_thinning, HawkesSpec, KernelSpec};
use sahp_core::training::nll_per_event;

fn exp_spec(base: f64, alpha: f64, gamma: f64) -> HawkesSpec {
    HawkesSpec {
        num_types: 1,
        base: vec![base],
        kernels: vec![vec![KernelSpec::Exponential { alpha, gamma }]],
    }
}

#[test]
fn benchmark_process_fires_type_one_more_often() {
    let data = simulate_dataset(&HawkesSpec::synthetic_two_type(), 100.0, 100, 4).unwrap();
    let stats = data.stats();
    assert!(stats.type_counts[1] > stats.type_counts[0], "{:?}", stats.type_counts);
    assert!(stats.min_length > 0);
}

#[test]
fn stationary_rate_matches_branching_identity() {
    // mu / (1 - alpha/gamma) = 0.2 / 0.5
    let spec = exp_spec(0.2, 0.5, 1.0);
    let count: usize = (0..200)
        .map(|s| simulate_thinning(&spec, 200.0, rng::derive_indexed(2, "rate", s)).unwrap().len())
        .sum();
    let rate = count as f64 / (200.0 * 200.0);
    assert!((rate - 0.4).abs() / 0.4 < 0.05, "rate {rate}");
}

#[test]
fn fit_recovers_exponential_parameters() {
    let data = simulate_dataset(&exp_spec(0.2, 0.5, 1.0), 100.0, 500, 5).unwrap();
    let (fit, diag) = hp_fit(&data, &HawkesParams::uniform(vec![0.1], 0.2, 2.0), &FitOptions::default()).unwrap();
    assert!(diag.converged);
    for (est, truth) in [(fit.base[0], 0.2), (fit.excitation[0][0], 0.5), (fit.decay[0][0], 1.0)] {
        assert!((est - truth).abs() / truth < 0.15, "{est} vs {truth}");
    }
}

#[test]
fn poisson_data_fits_negligible_excitation() {
    let poisson = HawkesSpec {
        num_types: 1,
        base: vec![1.0],
        kernels: vec![vec![KernelSpec::Zero]],
    };
    let data = simulate_dataset(&poisson, 100.0, 200, 6).unwrap();
    let (fit, _) = hp_fit(&data, &HawkesParams::uniform(vec![0.5], 0.2, 1.0), &FitOptions::default()).unwrap();
    assert!(fit.excitation[0][0] < 0.05, "alpha {}", fit.excitation[0][0]);
    assert!((fit.base[0] - 1.0).abs() < 0.05, "mu {}", fit.base[0]);
}

#[test]
fn mc_nll_agrees_with_closed_form() {
    let params = HawkesParams::uniform(vec![0.1, 0.2], 0.1, 0.8);
    let data = simulate_dataset(&HawkesSpec::synthetic_two_type(), 100.0, 20, 8).unwrap();
    let seqs: Vec<_> = data.sequences.iter().collect();
    let mut ll = 0.0;
    let mut n = 0;
    for s in &seqs {
        ll += hp_window_loglik(&params, s).unwrap();
        n += s.len() - 1;
    }
    let exact = -ll / n as f64;
    let mc = nll_per_event(&params, &seqs, 50, 1, "check").unwrap();
    assert!((mc - exact).abs() / exact < 2e-3, "{mc} vs {exact}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simulated_sequences_are_valid(
        mu in 0.05f64..1.0,
        branching in 0.0f64..0.9,
        gamma in 0.2f64..5.0,
        horizon in 1.0f64..60.0,
        seed in any::<u64>(),
    ) {
        let spec = exp_spec(mu, branching * gamma, gamma);
        let seq = simulate_thinning(&spec, horizon, seed).unwrap();
        prop_assert!(validate_sequence(&seq, 1).is_empty());
        prop_assert_eq!(seq, simulate_thinning(&spec, horizon, seed).unwrap());
    }
}
