mod common;

use ebmeta::asymptotics::EbCovariance;
use ebmeta::combiners::{combine_ivw, combine_ocwe, combine_sclearner, simplex_qp, Weights};
use ebmeta::pipeline::{run_pipeline, PipelineOptions};
use ebmeta::sim::{generate, Scenario, ScenarioId};
use ebmeta::Link;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn objective(q: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    (w.transpose() * q * w)[0]
}

/// Block-diagonal stacked covariance with the given per-model blocks and an identity internal block.
fn block_cov(blocks: &[DMatrix<f64>]) -> EbCovariance {
    let d = blocks[0].nrows();
    let k = blocks.len();
    let mut m = DMatrix::zeros((k + 1) * d, (k + 1) * d);
    for (j, b) in blocks.iter().enumerate() {
        m.view_mut((j * d, j * d), (d, d)).copy_from(b);
    }
    m.view_mut((k * d, k * d), (d, d)).fill_with_identity();
    EbCovariance {
        matrix: m,
        n_models: k,
        dim: d,
        mc_draws: 0,
        seed: 0,
        repair_shift: 0.0,
    }
}

/// First-order optimality on the simplex: equal gradients on the support,
/// no smaller gradient off it.
fn assert_kkt(q: &DMatrix<f64>, w: &DVector<f64>) {
    let g = q * w * 2.0;
    let tol = 1e-8 * (1.0 + q.amax());
    let level = (0..w.len()).filter(|&j| w[j] > 1e-9).map(|j| g[j]).fold(f64::INFINITY, f64::min);
    for j in 0..w.len() {
        if w[j] > 1e-9 {
            assert!((g[j] - level).abs() < tol, "support gradient {j}: {} vs {level}", g[j]);
        } else {
            assert!(g[j] >= level - tol, "off-support gradient {j}: {} below {level}", g[j]);
        }
    }
}

#[test]
fn simplex_solution_beats_fine_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let q = common::random_psd(&mut rng, 3, 1 + i % 3);
        let w = simplex_qp(&q).unwrap();
        let grid = common::grid_simplex_min(&q, 0.005);
        let got = objective(&q, &w);
        // the grid is coarse, so only a loss against it counts
        assert!(got - grid < 1e-5, "instance {i}: gap {}", got - grid);
        assert_kkt(&q, &w);
    }
}

#[test]
fn dominated_model_gets_almost_no_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let mut q = common::random_pd(&mut rng, 3);
        let j = rng.random_range(0..3);
        for c in 0..3 {
            q[(j, c)] *= 100.0;
            q[(c, j)] *= 100.0;
        }
        let w = simplex_qp(&q).unwrap();
        assert!(w[j] <= 0.01, "{w}");
    }
}

#[test]
fn ivw_and_ocwe_coincide_for_independent_proportional_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = common::random_pd(&mut rng, 3);
    let cov = block_cov(&[&base * 1.0, &base * 2.5, &base * 0.7]);
    let design = DMatrix::from_fn(50, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let eb: Vec<DVector<f64>> = (0..3).map(|_| common::random_vector(&mut rng, 3)).collect();
    let ivw = combine_ivw(&eb, &cov, &design).unwrap();
    let ocwe = combine_ocwe(&eb, &cov, &design).unwrap();
    assert!((ivw.gamma_final - ocwe.gamma_final).amax() < 1e-10);
}

#[test]
fn sclearner_averages_when_models_are_exchangeable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = common::random_pd(&mut rng, 4);
    let cov = block_cov(&[v.clone(), v.clone(), v]);
    let eb: Vec<DVector<f64>> = (0..3).map(|_| common::random_vector(&mut rng, 4)).collect();
    let coverage = vec![vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 2]];
    let gi = common::random_vector(&mut rng, 4);
    let res = combine_sclearner(&eb, &cov, &coverage, &gi).unwrap();
    for j in 0..3 {
        let mean = eb.iter().map(|e| e[j]).sum::<f64>() / 3.0;
        assert!((res.gamma_final[j] - mean).abs() < 1e-10);
    }
    assert_eq!(res.gamma_final[3], gi[3]);
}

#[test]
fn sclearner_excludes_models_missing_a_covariate() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let blocks: Vec<DMatrix<f64>> = (0..3).map(|_| common::random_pd(&mut rng, 5)).collect();
    let cov = block_cov(&blocks);
    let eb: Vec<DVector<f64>> = (0..3).map(|_| common::random_vector(&mut rng, 5)).collect();
    let coverage = vec![vec![0, 1, 2, 3], vec![0, 1, 2], vec![0, 1, 3]];
    let gi = common::random_vector(&mut rng, 5);
    let res = combine_sclearner(&eb, &cov, &coverage, &gi).unwrap();
    let Weights::PerCoefficient { weights, from_internal } = &res.weights else { panic!("per-coefficient weights expected") };
    assert_eq!(weights[(1, 3)], 0.0);
    assert!(weights[(0, 3)] > 0.0 && weights[(2, 3)] > 0.0);
    assert_eq!(weights[(2, 2)], 0.0);
    assert_eq!(from_internal, &vec![false, false, false, false, true]);
    for j in 0..4 {
        assert!((weights.column(j).sum() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn sclearner_uses_the_sole_contributor_in_scenario_five() {
    let g = generate(&Scenario::new(ScenarioId::V), 7, 0).unwrap();
    let out = run_pipeline(&g.internal, &g.externals, Link::Logit, &PipelineOptions::all(2000, 7)).unwrap();
    let sc = out.combinations.iter().find(|c| matches!(c.weights, Weights::PerCoefficient { .. })).unwrap();
    let eb2 = out.eb_cov.as_ref().unwrap().var_eb(1);
    for j in 5..=7 {
        assert!((sc.se_final[j] - eb2[(j, j)].sqrt()).abs() < 1e-12);
        assert!(sc.se_final[j] < out.internal.standard_errors()[j]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn simplex_weights_are_feasible_and_never_worse_than_simple_choices(seed in any::<u64>(), k in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = common::random_psd(&mut rng, k, 1 + (seed as usize) % k);
        let w = simplex_qp(&q).unwrap();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.sum() - 1.0).abs() < 1e-10);
        let got = objective(&q, &w);
        let tol = 1e-10 * (1.0 + q.amax());
        let uniform = DVector::from_element(k, 1.0 / k as f64);
        prop_assert!(got <= objective(&q, &uniform) + tol);
        for j in 0..k {
            prop_assert!(got <= q[(j, j)] + tol);
        }
    }
}
