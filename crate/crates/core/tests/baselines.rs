mod common;

use common::{anisotropic, centered, gram, orthonormality_error, reconstruction_error, sym_eigen, top_eigen_sum};
use fdrmfl_core::baselines::{
    baseline_pipeline, fit_pca, fit_rp, fit_tsvd, reduced_model_config, ReducerKind, ReducerSet,
    REDUCED,
};
use fdrmfl_core::datagen::{ClientDataset, ModalSample};
use fdrmfl_core::fedsim::{run_training, RoundConfig, TrainOptions};
use fdrmfl_core::losses::LossWeights;
use fdrmfl_core::rng;
use fdrmfl_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn axis_aligned_points() {
    let x = [-3.0, 0.0, -1.0, 0.0, 0.5, 0.0, 3.5, 0.0];
    let r = fit_pca(&x, 4, 2, 1).unwrap();
    let p = r.projection.data();
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
}

#[test]
fn full_width_pca_diagonalizes_the_covariance() {
    let (n, d_in) = (400, 4);
    let x = anisotropic(n, d_in, 1);
    let r = fit_pca(&x, n, d_in, d_in).unwrap();
    let xc = centered(&x, n, d_in);
    let cov: Vec<f64> = gram(&xc, n, d_in).iter().map(|v| v / n as f64).collect();
    let (vals, _) = sym_eigen(cov.clone(), d_in);
    let p = r.projection.data();
    for a in 0..d_in {
        for b in 0..d_in {
            let mut s = 0.0;
            for i in 0..d_in {
                for j in 0..d_in {
                    s += p[i * d_in + a] * cov[i * d_in + j] * p[j * d_in + b];
                }
            }
            let want = if a == b { vals[a] } else { 0.0 };
            assert!((s - want).abs() < 1e-10, "({a},{b}) {s} vs {want}");
        }
    }
}

#[test]
fn kept_variance_matches_eigenvalue_trace() {
    let (n, d_in, d) = (150, 9, 4);
    let x = anisotropic(n, d_in, 2);
    let r = fit_pca(&x, n, d_in, d).unwrap();
    let xc = centered(&x, n, d_in);
    let (vals, _) = sym_eigen(gram(&xc, n, d_in), d_in);
    let z = r.transform_rows(&x).unwrap();
    let var: f64 = z.iter().map(|v| v * v).sum();
    let want: f64 = vals[..d].iter().sum();
    assert!((var - want).abs() < 1e-8, "{var} vs {want}");
}

#[test]
fn tsvd_on_centered_data_equals_pca() {
    let (n, d_in, d) = (80, 7, 3);
    let xc = centered(&anisotropic(n, d_in, 3), n, d_in);
    let a = fit_pca(&xc, n, d_in, d).unwrap();
    let b = fit_tsvd(&xc, n, d_in, d).unwrap();
    for (u, v) in a.projection.data().iter().zip(b.projection.data()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn eckart_young_against_eigen_oracle() {
    for (seed, n, d_in) in [(4u64, 60usize, 10usize), (5, 12, 20), (6, 200, 16)] {
        let x = anisotropic(n, d_in, seed);
        let (vals, _) = sym_eigen(gram(&x, n, d_in), d_in);
        for d in 1..=d_in.min(n) {
            let r = fit_tsvd(&x, n, d_in, d).unwrap();
            assert!(orthonormality_error(&r) < 1e-8);
            let err = reconstruction_error(&x, d_in, r.projection.data(), d);
            let discarded: f64 = vals[d..].iter().map(|v| v.max(0.0)).sum();
            assert!((err - discarded).abs() < 1e-8, "n={n} d_in={d_in} d={d}: {err} vs {discarded}");
        }
    }
}

#[test]
fn rank_one_input_reconstructs_exactly() {
    let u = [2.0, -1.0, 0.5, 3.0];
    let v = [1.0, 0.0, -2.0, 0.5, 1.5];
    let x: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
    let r = fit_tsvd(&x, 4, 5, 1).unwrap();
    assert!(reconstruction_error(&x, 5, r.projection.data(), 1) < 1e-20);
}

#[test]
fn randomized_path_matches_oracle_on_wide_input() {
    // min(n, d_in) above the exact-solver limit.
    let (n, d_in, d) = (520, 530, 6);
    let mut r = rng::stream(8, &[]);
    let f: Vec<f64> = (0..n * 8).map(|_| StandardNormal.sample(&mut r)).collect();
    let g: Vec<f64> = (0..8 * d_in).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut x = vec![0.0; n * d_in];
    for i in 0..n {
        for k in 0..8 {
            let s = 10.0 / (1.0 + k as f64).powi(2);
            for j in 0..d_in {
                x[i * d_in + j] += s * f[i * 8 + k] * g[k * d_in + j];
            }
        }
        for j in 0..d_in {
            let e: f64 = StandardNormal.sample(&mut r);
            x[i * d_in + j] += 1e-3 * e;
        }
    }
    let red = fit_tsvd(&x, n, d_in, d).unwrap();
    assert!(orthonormality_error(&red) < 1e-8);
    let total: f64 = x.iter().map(|v| v * v).sum();
    let err = reconstruction_error(&x, d_in, red.projection.data(), d);
    let discarded = total - top_eigen_sum(&gram(&x, n, d_in), d_in, d);
    assert!((err - discarded).abs() < 1e-8 * total, "{err} vs {discarded}");
}

#[test]
fn reducer_invariances() {
    let (n, d_in, d) = (50, 6, 3);
    let x = anisotropic(n, d_in, 9);
    let base = fit_pca(&x, n, d_in, d).unwrap();
    let shifted: Vec<f64> = x.chunks(d_in).flat_map(|r| r.iter().enumerate().map(|(j, v)| v + 5.0 * j as f64).collect::<Vec<_>>()).collect();
    let moved = fit_pca(&shifted, n, d_in, d).unwrap();
    let mut rows: Vec<&[f64]> = x.chunks(d_in).collect();
    rows.reverse();
    let permuted: Vec<f64> = rows.concat();
    let perm = fit_pca(&permuted, n, d_in, d).unwrap();
    for other in [&moved, &perm] {
        for (a, b) in base.projection.data().iter().zip(other.projection.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

fn vector_clients(seed: u64, d_in: usize, n_train: usize, n_test: usize) -> Vec<ClientDataset> {
    let mut r = rng::stream(seed, &[0xC11]);
    let mut sample = || {
        let x: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut r)).collect();
        let y = (x[0] + 0.5 * x[1] - 0.3 * x[2] * x[3]).tanh();
        (x, y)
    };
    (1..=3)
        .map(|id| {
            let mut mk = |m: usize| -> Vec<ModalSample> {
                (0..m)
                    .map(|_| {
                        let (x, y) = sample();
                        ModalSample::new(vec![("v".into(), Tensor::vector(x))], y)
                    })
                    .collect()
            };
            ClientDataset {
                client_id: id,
                train: mk(n_train),
                test: mk(n_test),
                weight: 1.0 / 3.0,
            }
        })
        .collect()
}

#[test]
fn reducers_see_only_training_rows() {
    let clients = vector_clients(1, 6, 20, 10);
    let mut poisoned = clients.clone();
    for c in &mut poisoned {
        for s in &mut c.test {
            let t = s.modalities.get_mut("v").unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 1e6);
        }
    }
    for kind in [ReducerKind::Pca, ReducerKind::Tsvd, ReducerKind::Rp] {
        assert_eq!(
            ReducerSet::fit(&clients, kind, 3, 4).unwrap(),
            ReducerSet::fit(&poisoned, kind, 3, 4).unwrap()
        );
    }
}

#[test]
fn full_width_pca_pipeline_matches_raw_features() {
    let d_in = 6;
    let cfg = RoundConfig {
        rounds: 5,
        local_epochs: 3,
        batch_size: 32,
        learning_rate: 1e-2,
        clients: 3,
        seed: 0,
    };
    let (mut pca_sum, mut raw_sum) = (0.0, 0.0);
    for seed in 0..5 {
        let clients = vector_clients(seed, d_in, 200, 60);
        let c = RoundConfig { seed, ..cfg };
        let pca = baseline_pipeline(&clients, ReducerKind::Pca, d_in, &c, &[16], &TrainOptions::default()).unwrap();
        let raw_clients: Vec<ClientDataset> = clients
            .iter()
            .map(|cl| {
                let rename = |s: &ModalSample| ModalSample::new(vec![(REDUCED.into(), s.get("v").unwrap().clone())], s.target);
                ClientDataset {
                    train: cl.train.iter().map(rename).collect(),
                    test: cl.test.iter().map(rename).collect(),
                    ..cl.clone()
                }
            })
            .collect();
        let raw = run_training(&reduced_model_config(d_in, &[16]), &c, &LossWeights::mse_only(), &raw_clients, &TrainOptions::default()).unwrap();
        pca_sum += pca.final_pooled_test_mse();
        raw_sum += raw.final_pooled_test_mse();
    }
    let rel = (pca_sum - raw_sum).abs() / raw_sum;
    assert!(rel <= 0.10, "pca {} raw {} rel {rel}", pca_sum / 5.0, raw_sum / 5.0);
}

#[test]
fn reducers_share_data_order() {
    let clients = vector_clients(2, 5, 30, 10);
    let t: Vec<Vec<f64>> = [ReducerKind::Pca, ReducerKind::Tsvd, ReducerKind::Rp]
        .iter()
        .map(|&k| {
            let set = ReducerSet::fit(&clients, k, 3, 1).unwrap();
            set.reduce_clients(&clients).unwrap().iter().flat_map(|c| c.train.iter().map(|s| s.target)).collect()
        })
        .collect();
    assert_eq!(t[0], t[1]);
    assert_eq!(t[1], t[2]);
}

#[test]
fn random_projection_preserves_distances() {
    let rp = fit_rp(512, 64, 11).unwrap();
    let mut r = rng::stream(12, &[]);
    let mut within = 0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut r)).collect();
        let b: Vec<f64> = (0..512).map(|_| r.random_range(-2.0..2.0)).collect();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let pd = rp.transform(&diff).unwrap();
        let ratio = pd.iter().map(|v| v * v).sum::<f64>() / diff.iter().map(|v| v * v).sum::<f64>();
        if (0.6..=1.4).contains(&ratio) {
            within += 1;
        }
    }
    assert!(within >= 95, "{within}/100");
}

#[test]
fn projected_unit_vector_has_unit_expected_norm() {
    let mut x = vec![0.0; 40];
    x[3] = 0.6;
    x[17] = 0.8;
    let mean: f64 = (0..1000u64)
        .map(|seed| fit_rp(40, 16, seed).unwrap().transform(&x).unwrap().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / 1000.0;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
    assert_eq!(fit_rp(40, 16, 3).unwrap(), fit_rp(40, 16, 3).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn pca_and_tsvd_columns_are_orthonormal(seed in any::<u64>(), n in 3usize..40, d_in in 1usize..12, frac in 0.0f64..1.0) {
        let d = 1 + ((d_in.min(n) - 1) as f64 * frac) as usize;
        let x = anisotropic(n, d_in, seed);
        prop_assert!(orthonormality_error(&fit_pca(&x, n, d_in, d).unwrap()) < 1e-8);
        prop_assert!(orthonormality_error(&fit_tsvd(&x, n, d_in, d).unwrap()) < 1e-8);
    }
}
