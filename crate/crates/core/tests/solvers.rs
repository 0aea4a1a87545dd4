mod common;

use cdghmm::cholesky::{decompose, ModChol};
use cdghmm::covariance::{gaussian_q, solve_eva, solve_evi, solve_member, update_mean_and_scatter, WeightedScatter};
use cdghmm::forward_backward::posteriors;
use cdghmm::missingness::{conditional_moments, PatternCache};
use cdghmm::types::{count_free_params, HmmParams, MissParams, ModelStructure, PanelDataset};
use common::random_spd;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Expected Gaussian log-likelihood per unit weight, from dense `Σ`.
fn dense_q(scatter: &WeightedScatter, chol: &[ModChol]) -> f64 {
    scatter
        .s
        .iter()
        .zip(chol)
        .zip(&scatter.pi)
        .map(|((s, c), &w)| {
            let sigma = c.sigma();
            let inv = sigma.clone().try_inverse().unwrap();
            -0.5 * w * (sigma.determinant().ln() + (inv * s).trace())
        })
        .sum()
}

fn random_scatter(rng: &mut ChaCha8Rng, m: usize, p: usize) -> WeightedScatter {
    let s = (0..m).map(|_| random_spd(rng, p)).collect();
    let n_j = (0..m).map(|_| rng.gen_range(5.0..50.0)).collect();
    WeightedScatter::new(s, n_j)
}

/// Every single-coordinate perturbation of the free parameters of `structure`.
fn perturbations(structure: ModelStructure, chol: &[ModChol], h: f64) -> Vec<Vec<ModChol>> {
    let (m, p) = (chol.len(), chol[0].dim());
    let mut out = Vec::new();
    let groups: Vec<Vec<usize>> = if structure.shared_t() { vec![(0..m).collect()] } else { (0..m).map(|j| vec![j]).collect() };
    for g in &groups {
        for r in 0..p {
            for c in 0..r {
                for sign in [-1.0, 1.0] {
                    let mut next = chol.to_vec();
                    for &j in g {
                        next[j].t[(r, c)] += sign * h;
                    }
                    out.push(next);
                }
            }
        }
    }
    let groups: Vec<Vec<usize>> = if structure.shared_d() { vec![(0..m).collect()] } else { (0..m).map(|j| vec![j]).collect() };
    let coords: Vec<Vec<usize>> = if structure.isotropic() { vec![(0..p).collect()] } else { (0..p).map(|r| vec![r]).collect() };
    for g in &groups {
        for cs in &coords {
            for sign in [-1.0, 1.0] {
                let mut next = chol.to_vec();
                for &j in g {
                    for &r in cs {
                        next[j].d[r] *= 1.0 + sign * h;
                    }
                }
                out.push(next);
            }
        }
    }
    out
}

#[test]
fn closed_form_members_are_local_maximizers() {
    let closed = ["VVA", "VEA", "VVI", "VEI", "EEA", "EEI"];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=3);
        let p = rng.gen_range(2..=4);
        let scatter = random_scatter(&mut rng, m, p);
        for code in closed {
            let st: ModelStructure = code.parse().unwrap();
            let fit = solve_member(st, &scatter, None).unwrap();
            let q0 = dense_q(&scatter, &fit.chol);
            for cand in perturbations(st, &fit.chol, 1e-3) {
                let q = dense_q(&scatter, &cand);
                assert!(q <= q0 + 1e-12, "{code} seed {seed}: perturbation raised Q by {}", q - q0);
            }
        }
    }
}

#[test]
fn conditional_cycles_converge_to_local_maximizer() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scatter = random_scatter(&mut rng, 2, 3);
        for code in ["EVA", "EVI"] {
            let st: ModelStructure = code.parse().unwrap();
            let mut chol = solve_member(st, &scatter, None).unwrap().chol;
            for _ in 0..2000 {
                chol = solve_member(st, &scatter, Some(&chol)).unwrap().chol;
            }
            let q0 = dense_q(&scatter, &chol);
            for cand in perturbations(st, &chol, 1e-3) {
                assert!(dense_q(&scatter, &cand) <= q0 + 1e-10, "{code} seed {seed}");
            }
        }
    }
}

#[test]
fn evi_first_autoregressive_coefficient() {
    // with D_j = δ_j I the first row solves κ¹¹ φ = −κ²¹
    let s1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
    let s2 = DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 3.0]);
    let scatter = WeightedScatter::new(vec![s1.clone(), s2.clone()], vec![30.0, 10.0]);
    let prev = vec![
        ModChol { t: DMatrix::identity(2, 2), d: DVector::from_element(2, 1.5) },
        ModChol { t: DMatrix::identity(2, 2), d: DVector::from_element(2, 0.5) },
    ];
    let fit = solve_evi(&scatter, Some(&prev)).unwrap();
    let kappa = s1 * (0.75 / 1.5) + s2 * (0.25 / 0.5);
    assert!((fit.chol[0].t[(1, 0)] + kappa[(1, 0)] / kappa[(0, 0)]).abs() < 1e-12);
    assert_eq!(fit.chol[0].t, fit.chol[1].t);
}

#[test]
fn evi_scaled_identity_scatters() {
    let scatter = WeightedScatter::new(vec![DMatrix::identity(3, 3) * 2.0, DMatrix::identity(3, 3) * 5.0], vec![1.0, 3.0]);
    let fit = solve_evi(&scatter, None).unwrap();
    for (c, want) in fit.chol.iter().zip([2.0, 5.0]) {
        assert!((c.t.clone() - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!(c.d.iter().all(|&d| (d - want).abs() < 1e-12));
    }
}

#[test]
fn vei_scaled_identity_scatters_pool_the_scale() {
    let scatter = WeightedScatter::new(vec![DMatrix::identity(2, 2) * 2.0, DMatrix::identity(2, 2) * 6.0], vec![3.0, 1.0]);
    let fit = solve_member(ModelStructure::VEI, &scatter, None).unwrap();
    for c in &fit.chol {
        assert!(c.d.iter().all(|&d| (d - 3.0).abs() < 1e-12));
    }
}

#[test]
fn equal_scatters_reduce_to_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_spd(&mut rng, 4);
    let reference = decompose(&s).unwrap();
    let scatter = WeightedScatter::new(vec![s.clone(), s.clone()], vec![4.0, 9.0]);
    for st in [ModelStructure::EEA, ModelStructure::EVA, ModelStructure::VVA, ModelStructure::VEA] {
        let fit = solve_member(st, &scatter, None).unwrap();
        let fit = if st.code().starts_with("EV") { (0..50).fold(fit, |f, _| solve_member(st, &scatter, Some(&f.chol)).unwrap()) } else { fit };
        for c in &fit.chol {
            assert!((&c.t - &reference.t).amax() < 1e-8, "{st}");
            assert!((&c.d - &reference.d).amax() < 1e-8, "{st}");
        }
    }
}

#[test]
fn ecm_cycles_never_lower_q() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(2..=4);
        let p = rng.gen_range(2..=5);
        let scatter = random_scatter(&mut rng, m, p);
        for solve in [solve_eva, solve_evi] {
            let mut chol = solve(&scatter, None).unwrap().chol;
            let mut q = gaussian_q(&scatter, &chol);
            for _ in 0..25 {
                chol = solve(&scatter, Some(&chol)).unwrap().chol;
                let next = gaussian_q(&scatter, &chol);
                assert!(next >= q - 1e-12 * (1.0 + q.abs()), "seed {seed}: {q} -> {next}");
                q = next;
            }
        }
    }
}

fn fixed_params(m: usize, p: usize, nt: usize) -> HmmParams {
    HmmParams {
        m,
        dropout: false,
        delta: vec![1.0 / m as f64; m],
        gamma: DMatrix::from_element(m, m, 1.0 / m as f64),
        mu: vec![DVector::zeros(p); m],
        chol: vec![ModChol::identity(p); m],
        miss: MissParams::mar(m, p, nt),
    }
}

#[test]
fn single_state_scatter_is_sample_covariance() {
    let values = vec![1.0, 2.0, 3.0, 1.0, 0.0, 5.0, 2.0, 2.0];
    let data = PanelDataset::new(2, 2, 2, values.clone(), vec![false; 8], vec![None; 2]).unwrap();
    let params = fixed_params(1, 2, 2);
    let cache = PatternCache::build(&data, &params).unwrap();
    let moments = conditional_moments(&data, &params, &cache);
    let post = posteriors(&data, &params).unwrap();
    let (mu, scatter) = update_mean_and_scatter(&data, &post, &moments, &params.mu);
    let rows: Vec<DVector<f64>> = values.chunks(2).map(DVector::from_column_slice).collect();
    let mean = rows.iter().fold(DVector::zeros(2), |a, r| a + r) / 4.0;
    let cov = rows.iter().fold(DMatrix::zeros(2, 2), |a, r| a + (r - &mean) * (r - &mean).transpose()) / 4.0;
    assert!((&mu[0] - &mean).amax() < 1e-12);
    assert!((&scatter.s[0] - &cov).amax() < 1e-12);
}

#[test]
fn symmetric_posteriors_give_pooled_means() {
    let values = vec![1.0, 2.0, 3.0, 1.0, 0.0, 5.0, 2.0, 2.0];
    let data = PanelDataset::new(2, 2, 2, values, vec![false; 8], vec![None; 2]).unwrap();
    let params = fixed_params(2, 2, 2);
    let cache = PatternCache::build(&data, &params).unwrap();
    let moments = conditional_moments(&data, &params, &cache);
    let post = posteriors(&data, &params).unwrap();
    let (mu, _) = update_mean_and_scatter(&data, &post, &moments, &params.mu);
    let pooled = DVector::from_vec(vec![1.5, 2.5]);
    assert!((&mu[0] - &pooled).amax() < 1e-12 && (&mu[1] - &pooled).amax() < 1e-12);
}

#[test]
fn missing_coordinate_adds_conditional_variance() {
    // one state, Σ = I, μ = (0.5, -1): the hole is filled with -1 and contributes 1 to S₂₂
    let values = vec![1.0, f64::NAN, 0.0, 2.0];
    let mask = vec![false, true, false, false];
    let data = PanelDataset::new(1, 2, 2, values, mask, vec![None]).unwrap();
    let mut params = fixed_params(1, 2, 2);
    params.mu[0] = DVector::from_vec(vec![0.5, -1.0]);
    let cache = PatternCache::build(&data, &params).unwrap();
    let moments = conditional_moments(&data, &params, &cache);
    assert_eq!(moments.mean(0, 0, 0), &[1.0, -1.0]);
    let post = posteriors(&data, &params).unwrap();
    let (mu, scatter) = update_mean_and_scatter(&data, &post, &moments, &params.mu);
    assert!((mu[0][1] - 0.5).abs() < 1e-12);
    // deviations ±1.5 from the mean plus one unit of imputation variance, over two rows
    assert!((scatter.s[0][(1, 1)] - (1.5 * 1.5 * 2.0 + 1.0) / 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn decomposition_round_trips(seed in any::<u64>(), p in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_spd(&mut rng, p);
        let c = decompose(&s).unwrap();
        let tst = &c.t * &s * c.t.transpose();
        prop_assert!((tst - DMatrix::from_diagonal(&c.d)).amax() < 1e-10);
        prop_assert!((c.log_det() - s.determinant().ln()).abs() < 1e-10);
        prop_assert!((c.sigma() - &s).amax() < 1e-10 * s.amax());
    }

    #[test]
    fn solver_output_respects_structure(seed in any::<u64>(), code in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=3);
        let p = rng.gen_range(2..=5);
        let scatter = random_scatter(&mut rng, m, p);
        let st = ModelStructure::ALL[code];
        let fit = solve_member(st, &scatter, None).unwrap();
        for c in &fit.chol {
            prop_assert!(c.is_well_formed(0.0));
            if st.isotropic() {
                prop_assert!(c.d.iter().all(|&d| d == c.d[0]));
            }
        }
        if st.shared_t() {
            prop_assert!(fit.chol.iter().all(|c| c.t == fit.chol[0].t));
        }
        if st.shared_d() {
            prop_assert!(fit.chol.iter().all(|c| c.d == fit.chol[0].d));
        }
    }

    #[test]
    fn counts_ordered_by_constraint(m in 1usize..=6, p in 2usize..=10) {
        let eei = count_free_params(ModelStructure::EEI, m, p);
        let vva = count_free_params(ModelStructure::VVA, m, p);
        for st in ModelStructure::ALL {
            let c = count_free_params(st, m, p);
            prop_assert!(eei <= c && c <= vva);
        }
    }
}
