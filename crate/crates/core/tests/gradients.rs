mod common;

use common::{term_check, STEP, TOL};
use fdrmfl_core::harness::selfcheck::{gradcheck_case, gradcheck_model_config, gradient_check};
use fdrmfl_core::losses::LossWeights;
use fdrmfl_core::model::GlobalModel;
use fdrmfl_core::rng;
use proptest::prelude::*;

#[test]
fn model_is_small() {
    let m = GlobalModel::init(&gradcheck_model_config(), &mut rng::stream(0, &[1])).unwrap();
    assert!(m.num_params() <= 2000, "{} params", m.num_params());
}

#[test]
fn prediction_term_alone() {
    for seed in 0..10 {
        let (m, c) = gradcheck_case(seed, LossWeights::mse_only()).unwrap();
        let e = gradient_check(&m, &c, STEP).unwrap();
        assert!(e <= TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn each_regularizer_alone() {
    for seed in 0..10 {
        for which in 0..3 {
            let e = term_check(seed, which);
            assert!(e <= TOL, "seed {seed} term {which}: {e:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn composed_objective_matches_central_differences(
        seed in any::<u64>(),
        l1 in 0.0f64..2.0,
        l2 in 0.0f64..2.0,
        l3 in 0.0f64..2.0,
        tau in 0.2f64..2.0,
        sigma in 0.5f64..2.0,
    ) {
        let w = LossWeights { lambda1: l1, lambda2: l2, lambda3: l3, tau, sigma, ..LossWeights::default() };
        let (m, c) = gradcheck_case(seed, w).unwrap();
        let e = gradient_check(&m, &c, STEP).unwrap();
        prop_assert!(e <= TOL, "relative error {:e}", e);
    }
}
