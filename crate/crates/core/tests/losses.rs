use fdrmfl_core::losses::{
    infonce_loss, mi_lower_bound_loss, mse_loss, symkl_alignment_loss, total_loss, BatchForward, LossWeights,
};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn oracle_mse(p: &[f64], y: &[f64]) -> f64 {
    p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

fn oracle_mi(p: &[f64], y: &[f64], yn: &[f64]) -> f64 {
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    let mut s = 0.0;
    for j in 0..p.len() {
        s += -sig(p[j] * y[j]).ln() - (1.0 - sig(p[j] * yn[j])).ln();
    }
    s / p.len() as f64
}

/// Gaussian KL between N(μ_a, σ²I) and N(μ_b, σ²I), summed both ways, per
/// sample and pair, averaged.
fn oracle_symkl(z: &[Vec<f64>], d: usize, sigma: f64) -> f64 {
    let m = z.len();
    let b = z[0].len() / d;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..m {
        for k in i + 1..m {
            pairs += 1;
            for j in 0..b {
                let mut sq = 0.0;
                for c in 0..d {
                    let diff = z[i][j * d + c] - z[k][j * d + c];
                    sq += diff * diff;
                }
                let kl = sq / (2.0 * sigma * sigma);
                total += 0.5 * (kl + kl);
            }
        }
    }
    total / (b as f64 * pairs as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

fn oracle_infonce(z: &[f64], prev: &[f64], hist: &[Vec<f64>], d: usize, tau: f64) -> f64 {
    if hist.is_empty() {
        return 0.0;
    }
    let b = z.len() / d;
    let mut s = 0.0;
    for j in 0..b {
        let row = &z[j * d..(j + 1) * d];
        let pos = (cosine(row, &prev[j * d..(j + 1) * d]) / tau).exp();
        let neg: f64 = hist.iter().map(|h| (cosine(row, &h[j * d..(j + 1) * d]) / tau).exp()).sum();
        s += -(pos / (pos + neg)).ln();
    }
    s / b as f64
}

#[test]
fn mse_hand_values() {
    assert_eq!(mse_loss(&[0.5], &[2.0]).unwrap(), 2.25);
    assert_eq!(mse_loss(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
    assert_eq!(mse_loss(&[3.0, -1.0], &[3.0, -1.0]).unwrap(), 0.0);
}

#[test]
fn mi_bound_identities() {
    let l = mi_lower_bound_loss(&[0.0, 0.0, 0.0], &[1.0, -2.0, 0.5], &[3.0, 1.0, -1.0]).unwrap();
    assert!((l - 2.0 * 2f64.ln()).abs() < TOL);
    let l = mi_lower_bound_loss(&[1.0], &[1.0], &[-1.0]).unwrap();
    assert!((l - 2.0 * softplus(-1.0)).abs() < TOL);
    assert!((l - 0.6265).abs() < 1e-4);
    let l = mi_lower_bound_loss(&[1.0], &[30.0], &[-30.0]).unwrap();
    assert!(l < 1e-12);
}

#[test]
fn symkl_identities() {
    let z = vec![1.0, -2.0, 0.5, 3.0];
    assert!(symkl_alignment_loss(&[z.clone(), z.clone(), z], 2, 0.7).unwrap().abs() < TOL);
    let l = symkl_alignment_loss(&[vec![0.0, 0.0], vec![2.0, 0.0]], 2, 1.0).unwrap();
    assert!((l - 2.0).abs() < TOL);
}

#[test]
fn symkl_matches_triple_loop() {
    let z = vec![
        vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4],
        vec![1.1, 0.0, -0.6, 0.9, -2.2, 0.5],
        vec![-0.7, 0.4, 1.5, -1.0, 0.3, 0.2],
    ];
    let got = symkl_alignment_loss(&z, 3, 0.5).unwrap();
    assert!((got - oracle_symkl(&z, 3, 0.5)).abs() < 1e-12);
}

#[test]
fn infonce_identities() {
    let z = vec![0.4, -1.0, 2.0];
    assert_eq!(infonce_loss(&z, &[1.0, 1.0, 1.0], &[], 3, 0.5).unwrap(), 0.0);
    for tau in [0.05, 0.5, 1.0, 7.0] {
        let l = infonce_loss(&z, &[0.8, -2.0, 4.0], &[vec![0.4, -1.0, 2.0]], 3, tau).unwrap();
        assert!((l - 2f64.ln()).abs() < TOL, "tau {tau}: {l}");
    }
    let l = infonce_loss(&[1.0, 0.0], &[3.0, 0.0], &[vec![0.0, 5.0]], 2, 1.0).unwrap();
    assert!((l - softplus(-1.0)).abs() < TOL);
    assert!((l - 0.3133).abs() < 1e-4);
}

fn forward_fixture(b: usize, d: usize, m: usize, seed: u64) -> BatchForward {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-2.0..2.0)).collect() };
    BatchForward {
        predictions: v(b),
        targets: v(b),
        negatives: v(b),
        features: (0..m).map(|_| v(b * d)).collect(),
        fused: v(b * d),
        prev: Some(v(b * d)),
        history: vec![v(b * d), v(b * d)],
        dim: d,
    }
}

#[test]
fn zero_weights_give_plain_mse() {
    let f = forward_fixture(5, 3, 3, 1);
    let l = total_loss(&f, &LossWeights::mse_only()).unwrap();
    assert_eq!(l.total, mse_loss(&f.predictions, &f.targets).unwrap());
}

#[test]
fn unit_weights_sum_the_terms() {
    let f = forward_fixture(4, 2, 2, 2);
    let w = LossWeights {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 1.0,
        tau: 1.0,
        sigma: 1.0,
        ..LossWeights::default()
    };
    let l = total_loss(&f, &w).unwrap();
    assert!((l.total - (l.pred + l.mi + l.kl + l.fcl)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn recomposition_matches_independent_terms(
        seed in any::<u64>(),
        b in 2usize..9,
        d in 1usize..5,
        m in 2usize..4,
        l1 in 0.0f64..3.0,
        l2 in 0.0f64..3.0,
        l3 in 0.0f64..3.0,
        tau in 0.1f64..3.0,
        sigma in 0.2f64..3.0,
    ) {
        let f = forward_fixture(b, d, m, seed);
        let w = LossWeights { lambda1: l1, lambda2: l2, lambda3: l3, tau, sigma, ..LossWeights::default() };
        let got = total_loss(&f, &w).unwrap();
        let pred = oracle_mse(&f.predictions, &f.targets);
        let mi = oracle_mi(&f.predictions, &f.targets, &f.negatives);
        let kl = oracle_symkl(&f.features, d, sigma);
        let fcl = oracle_infonce(&f.fused, f.prev.as_ref().unwrap(), &f.history, d, tau);
        let want = pred + l1 * mi + l2 * kl + l3 * fcl;
        prop_assert!((got.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", got.total, want);
        prop_assert!((got.pred - pred).abs() < 1e-12);
    }

    #[test]
    fn terms_are_nonnegative_and_symmetric(seed in any::<u64>(), b in 1usize..6, d in 1usize..4) {
        let f = forward_fixture(b, d, 2, seed);
        prop_assert!(mse_loss(&f.predictions, &f.targets).unwrap() >= 0.0);
        prop_assert!(mi_lower_bound_loss(&f.predictions, &f.targets, &f.negatives).unwrap() >= 0.0);
        let ab = symkl_alignment_loss(&f.features, d, 1.0).unwrap();
        let ba = symkl_alignment_loss(&[f.features[1].clone(), f.features[0].clone()], d, 1.0).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        let nce = infonce_loss(&f.fused, f.prev.as_ref().unwrap(), &f.history, d, 0.5).unwrap();
        prop_assert!(nce >= 0.0);
    }

    #[test]
    fn infonce_is_scale_invariant(seed in any::<u64>(), c in 0.1f64..10.0) {
        let f = forward_fixture(3, 4, 2, seed);
        let scaled: Vec<f64> = f.fused.iter().map(|v| v * c).collect();
        let a = infonce_loss(&f.fused, f.prev.as_ref().unwrap(), &f.history, 4, 0.5).unwrap();
        let s = infonce_loss(&scaled, f.prev.as_ref().unwrap(), &f.history, 4, 0.5).unwrap();
        prop_assert!((a - s).abs() < 1e-10);
    }
}
