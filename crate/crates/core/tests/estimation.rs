mod common;

use cdghmm::em::{fit, initialize, run_em, start_rng, FitConfig};
use cdghmm::forward_backward::log_likelihood;
use cdghmm::metrics::score;
use cdghmm::simulate::{generate, sim1_spec, sim3_spec};
use cdghmm::types::{Mechanism, ModelStructure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(st: ModelStructure, m: usize, mech: Mechanism, dropout: bool, seed: u64) -> FitConfig {
    let mut cfg = FitConfig::new(st, m);
    cfg.mechanism = mech;
    cfg.dropout = dropout;
    cfg.seed = seed;
    cfg.n_starts = 3;
    cfg
}

#[test]
fn complete_data_estimates_do_not_depend_on_mechanism() {
    let mut spec = sim1_spec("G1", 40).unwrap();
    spec.seed = 11;
    let sim = generate(&spec).unwrap();
    let mar = fit(&sim.data, &config(ModelStructure::VVA, 2, Mechanism::Mar, false, 5)).unwrap();
    let state = fit(&sim.data, &config(ModelStructure::VVA, 2, Mechanism::State, false, 5)).unwrap();
    assert_eq!(mar.decoded, state.decoded);
    for j in 0..2 {
        assert!((&mar.params.mu[j] - &state.params.mu[j]).amax() < 1e-6);
        assert!((mar.params.sigma(j) - state.params.sigma(j)).amax() < 1e-6);
    }
    assert!((&mar.params.gamma - &state.params.gamma).amax() < 1e-6);
}

#[test]
fn dropout_flag_is_inert_without_dropout() {
    let mut spec = sim1_spec("G1", 30).unwrap();
    spec.seed = 3;
    let sim = generate(&spec).unwrap();
    let off = fit(&sim.data, &config(ModelStructure::EEA, 2, Mechanism::Mar, false, 1)).unwrap();
    let on = fit(&sim.data, &config(ModelStructure::EEA, 2, Mechanism::Mar, true, 1)).unwrap();
    assert!((off.loglik - on.loglik).abs() < 1e-8 * off.loglik.abs());
    assert_eq!(off.decoded, on.decoded);
    assert!(on.params.gamma.column(2).iter().all(|&g| g.abs() < 1e-12 || g == 1.0));
}

#[test]
fn same_seed_same_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = common::random_data(&mut rng, 15, 4, 3, 0.2, true);
    let cfg = config(ModelStructure::EVI, 2, Mechanism::StateVariable, true, 42);
    let a = fit(&data, &cfg).unwrap();
    let b = fit(&data, &cfg).unwrap();
    assert_eq!(a.loglik_trace, b.loglik_trace);
    assert_eq!(a.params, b.params);
}

#[test]
fn final_loglik_matches_forward_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = common::random_data(&mut rng, 20, 4, 2, 0.15, true);
    let res = fit(&data, &config(ModelStructure::VEA, 2, Mechanism::StateTimeShared, true, 0)).unwrap();
    let ll = log_likelihood(&data, &res.params).unwrap();
    assert!((ll - res.loglik).abs() < 1e-9 * ll.abs());
    assert_eq!(res.ascent_violations(), 0, "{:?}", res.diagnostics);
}

#[test]
fn light_missingness_is_classified_accurately() {
    let mut total = 0.0;
    for r in 0..4 {
        let mut spec = sim3_spec(2, 0.1, 100).unwrap();
        spec.seed = 900 + r;
        let sim = generate(&spec).unwrap();
        let res = fit(&sim.data, &config(ModelStructure::VVA, 2, Mechanism::Mar, true, r)).unwrap();
        total += score(&res.decoded, &sim.states, &res.params, &sim.truth).unwrap().misclass;
    }
    assert!(total / 4.0 < 0.05, "mean misclassification {}", total / 4.0);
}

#[test]
fn dropout_transitions_recovered() {
    let mut spec = sim3_spec(2, 0.1, 500).unwrap();
    spec.seed = 77;
    let sim = generate(&spec).unwrap();
    let res = fit(&sim.data, &config(ModelStructure::VVA, 2, Mechanism::State, true, 0)).unwrap();
    let rep = score(&res.decoded, &sim.states, &res.params, &sim.truth).unwrap();
    let g = res.params.permuted(&rep.permutation).gamma;
    for a in 0..2 {
        for b in 0..3 {
            assert!((g[(a, b)] - sim.truth.gamma[(a, b)]).abs() < 0.06, "({a},{b}): {} vs {}", g[(a, b)], sim.truth.gamma[(a, b)]);
        }
    }
}

#[test]
fn relabeled_start_gives_relabeled_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = common::random_data(&mut rng, 25, 4, 2, 0.2, true);
    for st in [ModelStructure::VVA, ModelStructure::EVI] {
        let cfg = config(st, 3, Mechanism::StateVariable, true, 8);
        let start = initialize(&data, &cfg, &mut start_rng(8, 0)).unwrap();
        let perm = [2, 0, 1];
        let a = run_em(&data, &cfg, start.clone()).unwrap();
        let b = run_em(&data, &cfg, start.permuted(&perm)).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-10 * a.loglik.abs(), "{st}");
        assert!((a.bic - b.bic).abs() < 1e-9 * a.bic.abs());
        assert!((a.icl - b.icl).abs() < 1e-9 * a.icl.abs());
        let aligned = a.params.permuted(&perm);
        for j in 0..3 {
            assert!((&aligned.mu[j] - &b.params.mu[j]).amax() < 1e-6, "{st}");
        }
    }
}
