mod common;

use ebmeta::asymptotics::{eb_covariance, eb_matrix_form, eb_point, estimate_blocks, joint_cov, shrink_factor};
use ebmeta::cspml::ConstraintSet;
use ebmeta::linalg::{min_eigenvalue, psd_sqrt};
use ebmeta::pipeline::{run_pipeline, Estimator, PipelineOptions};
use ebmeta::sim::{generate, Scenario, ScenarioId};
use ebmeta::{build_design, fit_mle, Link};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn scenario_one_joint(seed: u64) -> ebmeta::asymptotics::JointAsymptoticCov {
    let g = generate(&Scenario::new(ScenarioId::I), seed, 0).unwrap();
    let internal = fit_mle(&g.internal, Link::Logit).unwrap();
    let blocks = estimate_blocks(&g.internal, &g.externals, &internal.gamma_hat, Link::Logit).unwrap();
    joint_cov(&blocks).unwrap()
}

#[test]
fn jacobian_block_matches_finite_differences() {
    let g = generate(&Scenario::new(ScenarioId::I), 3, 0).unwrap();
    let design = build_design(&g.internal).unwrap();
    let gamma = fit_mle(&g.internal, Link::Logit).unwrap().gamma_hat;
    for spec in &g.externals {
        let c = ConstraintSet::from_spec(&g.internal, spec, Link::Logit).unwrap();
        let mean_u = |x: &DVector<f64>| c.scores(x, &design).row_mean().transpose();
        let fd = common::jacobian(&mean_u, &gamma, 1e-5);
        assert!((fd - c.mean_jacobian(&gamma, &design)).amax() < 1e-5);
    }
}

#[test]
fn constrained_internal_cross_block_equals_constrained_variance() {
    let joint = scenario_one_joint(5);
    for k in 0..joint.n_models {
        assert_eq!(joint.block(k, joint.n_models), joint.var_cml(k));
        assert_eq!(joint.block(joint.n_models, k), joint.var_cml(k));
    }
}

#[test]
fn constraints_never_lose_information() {
    for seed in 0..5 {
        let joint = scenario_one_joint(seed);
        for k in 0..joint.n_models {
            let gap = joint.var_internal() - joint.var_cml(k);
            assert!(min_eigenvalue(&gap) > -1e-8);
        }
    }
}

#[test]
fn scenario_one_standard_error_magnitudes() {
    let g = generate(&Scenario::new(ScenarioId::I), 2024, 0).unwrap();
    let mut opts = PipelineOptions::all(5000, 2024);
    opts.methods = [Estimator::Eb].into_iter().collect();
    let out = run_pipeline(&g.internal, &g.externals, Link::Logit, &opts).unwrap();
    let joint = out.joint.unwrap();
    let eb_cov = out.eb_cov.unwrap();
    for j in 1..=4 {
        let cml = joint.var_cml(2)[(j, j)].sqrt();
        // one dataset, so allow sampling noise around the .07-.09 band
        assert!((0.06..=0.095).contains(&cml), "CML_3 slope {j} SE {cml}");
        let eb = eb_cov.var_eb(2)[(j, j)].sqrt();
        assert!((0.16..=0.20).contains(&eb), "EB_3 slope {j} SE {eb}");
    }
}

#[test]
fn internal_minus_constrained_draws_are_uncorrelated_with_constrained_draws() {
    let joint = scenario_one_joint(8);
    let root = psd_sqrt(&joint.matrix);
    let (k, d) = (joint.n_models, joint.dim);
    let draws = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut z_all = DMatrix::zeros(draws, d);
    let mut c_all = DMatrix::zeros(draws, d);
    for r in 0..draws {
        let xi = DVector::from_fn((k + 1) * d, |_, _| StandardNormal.sample(&mut rng));
        let v = &root * xi;
        let cml = v.rows(0, d);
        let z = v.rows(k * d, d) - cml;
        z_all.set_row(r, &z.transpose());
        c_all.set_row(r, &cml.transpose());
    }
    for a in 0..d {
        for b in 0..d {
            let prod: Vec<f64> = (0..draws).map(|r| z_all[(r, a)] * c_all[(r, b)]).collect();
            let mean = prod.iter().sum::<f64>() / draws as f64;
            let sd = (prod.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / draws as f64).sqrt();
            assert!(mean.abs() < 3.0 * sd / (draws as f64).sqrt() + 1e-12, "({a},{b}) {mean}");
        }
    }
}

#[test]
fn eb_covariance_is_bitwise_reproducible() {
    let joint = scenario_one_joint(2);
    let a = eb_covariance(&joint, 1500, 42).unwrap();
    let b = eb_covariance(&joint, 1500, 42).unwrap();
    let c = eb_covariance(&joint, 1500, 43).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert_ne!(a.matrix, c.matrix);
    assert_eq!(a.var_internal(), joint.var_internal());
}

#[test]
fn eb_forms_agree_on_a_five_dimensional_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sigma = common::random_pd(&mut rng, 5);
    let gi = common::random_vector(&mut rng, 5);
    let gc = common::random_vector(&mut rng, 5);
    let a = eb_point(&gi, &gc, &sigma).unwrap();
    let b = eb_matrix_form(&gi, &gc, &sigma).unwrap();
    assert!((a - b).amax() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn eb_forms_agree(seed in any::<u64>(), d in 2usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = common::random_pd(&mut rng, d);
        let gi = common::random_vector(&mut rng, d);
        let gc = common::random_vector(&mut rng, d);
        let a = eb_point(&gi, &gc, &sigma).unwrap();
        let b = eb_matrix_form(&gi, &gc, &sigma).unwrap();
        let scale = 1.0 + gi.amax().max(gc.amax());
        prop_assert!((a - b).amax() < 1e-10 * scale);
    }

    #[test]
    fn eb_moves_along_the_discrepancy(seed in any::<u64>(), d in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = common::random_pd(&mut rng, d);
        let gi = common::random_vector(&mut rng, d);
        let gc = common::random_vector(&mut rng, d);
        let eb = eb_point(&gi, &gc, &sigma).unwrap();
        let z = &gi - &gc;
        let moved = &eb - &gc;
        let t = moved.dot(&z) / z.dot(&z);
        prop_assert!((0.0..1.0).contains(&t));
        prop_assert!((moved - &z * t).amax() < 1e-10 * (1.0 + z.amax()));
        prop_assert!((0.0..1.0).contains(&shrink_factor(z.dot(&sigma.clone().cholesky().unwrap().solve(&z)))));
    }
}
