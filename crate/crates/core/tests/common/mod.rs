#![allow(dead_code)]

use fdrmfl_core::datagen::{Batch, ClientDataset, ModalSample};
use fdrmfl_core::fedsim::RoundConfig;
use fdrmfl_core::harness::selfcheck::{
    gradcheck_case, gradcheck_model_config, objective, objective_gradient, relative_error, GRAD_FLOOR,
};
use fdrmfl_core::losses::{graph, LossWeights};
use fdrmfl_core::model::GlobalModel;
use fdrmfl_core::rng::{self, tag};
use fdrmfl_core::baselines::LinearReducer;
use fdrmfl_core::tensor::{Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn weights(l1: f64, l2: f64, l3: f64) -> LossWeights {
    LossWeights {
        lambda1: l1,
        lambda2: l2,
        lambda3: l3,
        ..LossWeights::default()
    }
}

/// Gradient of one loss term alone: the analytic difference
/// `∇(pred + term) − ∇pred` against central differences of the term value.
pub fn term_check(seed: u64, which: usize) -> f64 {
    let on = match which {
        0 => weights(1.0, 0.0, 0.0),
        1 => weights(0.0, 1.0, 0.0),
        _ => weights(0.0, 0.0, 1.0),
    };
    let (model, case_on) = gradcheck_case(seed, on).unwrap();
    let mut case_off = case_on.clone();
    case_off.weights = LossWeights::mse_only();
    let (_, g_on) = objective_gradient(&model, &case_on).unwrap();
    let (_, g_off) = objective_gradient(&model, &case_off).unwrap();
    let term = |m: &GlobalModel| {
        let b = objective(m, &case_on).unwrap();
        [b.mi, b.kl, b.fcl][which]
    };
    let base = model.flatten();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] += STEP;
        probe.load_flat(&x).unwrap();
        let up = term(&probe);
        x[i] = base[i] - STEP;
        probe.load_flat(&x).unwrap();
        let down = term(&probe);
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(g_on[i] - g_off[i], numeric, GRAD_FLOOR));
    }
    worst
}

/// Samples for the small two-modality model used by the gradient checks.
pub fn small_samples(n: usize, seed: u64) -> Vec<ModalSample> {
    let mut r = rng::stream(seed, &[99]);
    (0..n)
        .map(|_| {
            let a: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
            let y = a[0] - 0.5 * b[4] + 0.1 * r.random_range(-1.0..1.0);
            ModalSample::new(
                vec![("a".into(), Tensor::vector(a)), ("b".into(), Tensor::new(vec![3, 3], b).unwrap())],
                y,
            )
        })
        .collect()
}

pub fn single_client(n_train: usize, n_test: usize, seed: u64) -> Vec<ClientDataset> {
    vec![ClientDataset {
        client_id: 1,
        train: small_samples(n_train, seed),
        test: small_samples(n_test, seed + 1000),
        weight: 1.0,
    }]
}

pub fn zero_lambda() -> LossWeights {
    LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..LossWeights::default()
    }
}

/// Plain full-batch Adam on the MSE, restarting optimizer state every
/// `epochs` steps, written against the flattened parameters.
pub fn centralized_losses(cfg: &RoundConfig, samples: &[ModalSample]) -> (Vec<f64>, Vec<f64>) {
    let model_cfg = gradcheck_model_config();
    let mut model = GlobalModel::init(&model_cfg, &mut rng::stream(cfg.seed, &[tag::INIT])).unwrap();
    let idx: Vec<usize> = (0..samples.len()).collect();
    let batch = Batch::gather(samples, &idx, &["a", "b"]).unwrap();
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, cfg.learning_rate);
    let mut losses = Vec::new();
    for _round in 0..cfg.rounds {
        let mut w = model.flatten();
        let mut m = vec![0.0f64; w.len()];
        let mut v = vec![0.0f64; w.len()];
        for t in 1..=cfg.local_epochs {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let fv = bound.forward_batch(&mut tape, &batch).unwrap();
            let loss = graph::mse(&mut tape, fv.prediction, &batch.targets).unwrap();
            losses.push(tape.item(loss));
            let grads = tape.backward(loss).unwrap();
            let mut g_model = model.clone();
            g_model.store_grads(&bound, &grads);
            let mut g: Vec<f64> = Vec::new();
            g_model.visit(&mut |_, p| g.extend(p.grad.as_deref().unwrap()));
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
            model.load_flat(&w).unwrap();
        }
    }
    (losses, model.flatten())
}

pub fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[0xBA5E]);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Columns scaled so the spectrum has clear gaps.
pub fn anisotropic(n: usize, d_in: usize, seed: u64) -> Vec<f64> {
    let mut x = gaussian(n * d_in, seed);
    for row in x.chunks_mut(d_in) {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= 3.0 / (1.0 + j as f64) + 0.5;
        }
    }
    x
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; eigenvalues
/// descending with eigenvectors as columns.
pub fn sym_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let vals = idx.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (c, &i) in idx.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + c] = v[k * n + i];
        }
    }
    (vals, vecs)
}

/// Sum of the `d` largest eigenvalues of a PSD matrix by block subspace
/// iteration.
pub fn top_eigen_sum(g: &[f64], n: usize, d: usize) -> f64 {
    let mut q = gaussian(n * d, 77);
    for _ in 0..200 {
        let mut z = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..n {
                let gik = g[i * n + k];
                for c in 0..d {
                    z[i * d + c] += gik * q[k * d + c];
                }
            }
        }
        for c in 0..d {
            for prev in 0..c {
                let dot: f64 = (0..n).map(|i| z[i * d + c] * z[i * d + prev]).sum();
                for i in 0..n {
                    z[i * d + c] -= dot * z[i * d + prev];
                }
            }
            let norm = (0..n).map(|i| z[i * d + c].powi(2)).sum::<f64>().sqrt();
            for i in 0..n {
                z[i * d + c] /= norm;
            }
        }
        q = z;
    }
    (0..d)
        .map(|c| {
            (0..n)
                .map(|i| q[i * d + c] * (0..n).map(|k| g[i * n + k] * q[k * d + c]).sum::<f64>())
                .sum::<f64>()
        })
        .sum()
}

pub fn gram(x: &[f64], n: usize, d_in: usize) -> Vec<f64> {
    let mut g = vec![0.0; d_in * d_in];
    for r in 0..n {
        for i in 0..d_in {
            for j in 0..d_in {
                g[i * d_in + j] += x[r * d_in + i] * x[r * d_in + j];
            }
        }
    }
    g
}

pub fn centered(x: &[f64], n: usize, d_in: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d_in];
    for row in x.chunks(d_in) {
        for j in 0..d_in {
            mean[j] += row[j] / n as f64;
        }
    }
    x.chunks(d_in).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>()).collect()
}

pub fn orthonormality_error(r: &LinearReducer) -> f64 {
    let (d_in, d) = (r.input_dim(), r.output_dim());
    let p = r.projection.data();
    let mut worst = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let dot: f64 = (0..d_in).map(|i| p[i * d + a] * p[i * d + b]).sum();
            worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

/// `‖X − X P Pᵀ‖²_F` for the rows of `x`.
pub fn reconstruction_error(x: &[f64], d_in: usize, p: &[f64], d: usize) -> f64 {
    let mut err = 0.0;
    for row in x.chunks(d_in) {
        let z: Vec<f64> = (0..d).map(|k| (0..d_in).map(|i| row[i] * p[i * d + k]).sum()).collect();
        for i in 0..d_in {
            let back: f64 = (0..d).map(|k| z[k] * p[i * d + k]).sum();
            err += (row[i] - back).powi(2);
        }
    }
    err
}
