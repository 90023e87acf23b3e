//! Quick invariant and oracle checks behind the `check` subcommand.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baselines::{fit_pca, fit_rp, fit_tsvd};
use crate::datagen::{link1, link2, link3, Batch, ModalSample};
use crate::error::Result;
use crate::fedsim::{aggregate, aggregation_weights};
use crate::losses::{
    infonce_loss, mi_lower_bound_loss, negative_targets, symkl_alignment_loss, total_graph, Anchors,
    GraphInputs, LossBreakdown, LossWeights,
};
use crate::model::{checkpoint, Activation, EncoderConfig, FusionMode, GlobalModel, ModalityConfig, ModelConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Everything needed to evaluate the training objective on one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveCase {
    pub batch: Batch,
    pub negatives: Vec<f64>,
    pub prev: Option<Vec<f64>>,
    pub history: Vec<Vec<f64>>,
    pub weights: LossWeights,
}

fn build<'a>(
    model: &GlobalModel,
    case: &'a ObjectiveCase,
    tape: &mut Tape,
    trainable: bool,
) -> Result<(crate::model::Model<crate::tensor::Var>, crate::tensor::Var, LossBreakdown)> {
    let bound = model.bind(tape, trainable);
    let fv = bound.forward_batch(tape, &case.batch)?;
    let inputs = GraphInputs {
        prediction: fv.prediction,
        features: &fv.features,
        fused: fv.fused,
        targets: &case.batch.targets,
        negatives: &case.negatives,
        anchors: case.prev.as_deref().map(|prev| Anchors {
            prev,
            history: &case.history,
        }),
    };
    let (loss, parts) = total_graph(tape, &inputs, &case.weights)?;
    Ok((bound, loss, parts))
}

pub fn objective(model: &GlobalModel, case: &ObjectiveCase) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(build(model, case, &mut tape, false)?.2)
}

/// Loss breakdown and the gradient flattened in parameter order.
pub fn objective_gradient(model: &GlobalModel, case: &ObjectiveCase) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let (bound, loss, parts) = build(model, case, &mut tape, true)?;
    let grads = tape.backward(loss)?;
    let mut m = model.clone();
    m.store_grads(&bound, &grads);
    let mut flat = Vec::with_capacity(m.num_params());
    m.visit(&mut |_, t| flat.extend(t.grad.as_deref().unwrap_or(&[])));
    Ok((parts, flat))
}

/// The gradient-check model: an MLP with `tanh`, a bidirectional LSTM and
/// attention fusion into a linear head, all smooth so finite differences
/// stay valid. Under 2,000 parameters.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        modalities: vec![
            ModalityConfig {
                name: "a".into(),
                encoder: EncoderConfig::Vector {
                    input_dim: 5,
                    hidden: vec![6],
                    activation: Activation::Tanh,
                },
            },
            ModalityConfig {
                name: "b".into(),
                encoder: EncoderConfig::Sequence {
                    input_dim: 3,
                    hidden_dim: 4,
                    bidirectional: true,
                },
            },
        ],
        latent_dim: 4,
        fusion: FusionMode::Attention,
        head_hidden: vec![],
    }
}

/// A random model, batch, negatives and anchors for `seed`.
pub fn gradcheck_case(seed: u64, weights: LossWeights) -> Result<(GlobalModel, ObjectiveCase)> {
    let cfg = gradcheck_model_config();
    let mut r = rng::stream(seed, &[0x6772]);
    let mut model = GlobalModel::init(&cfg, &mut r)?;
    let flat: Vec<f64> = model
        .flatten()
        .iter()
        .map(|v| v * 2.0 + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut r))
        .collect::<Vec<f64>>();
    model.load_flat(&flat)?;
    let b = 4;
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut r)).collect() };
    let samples: Vec<ModalSample> = (0..b)
        .map(|_| {
            ModalSample::new(
                vec![
                    ("a".into(), Tensor::vector(normal(5))),
                    ("b".into(), Tensor::new(vec![3, 3], normal(9)).expect("shape")),
                ],
                normal(1)[0],
            )
        })
        .collect();
    let idx: Vec<usize> = (0..b).collect();
    let batch = Batch::gather(&samples, &idx, &["a", "b"])?;
    let d = cfg.latent_dim;
    let prev = normal(b * d);
    let history = vec![normal(b * d), normal(b * d)];
    let mut r2 = rng::stream(seed, &[0x6773]);
    let negatives = negative_targets(&batch.targets, &mut r2);
    Ok((
        model,
        ObjectiveCase {
            batch,
            negatives,
            prev: Some(prev),
            history,
            weights,
        },
    ))
}

/// Denominator floor for gradient comparisons. Central differences with step
/// `1e-5` carry about `1e-10` of round-off, so entries smaller than this are
/// held to an absolute error of `1e-4 · GRAD_FLOOR` instead.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Worst relative error between the analytic gradient and central
/// differences with step `h`.
pub fn gradient_check(model: &GlobalModel, case: &ObjectiveCase, h: f64) -> Result<f64> {
    let (_, analytic) = objective_gradient(model, case)?;
    let base = model.flatten();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        probe.load_flat(&x)?;
        let up = objective(&probe, case)?.total;
        x[i] = base[i] - h;
        probe.load_flat(&x)?;
        let down = objective(&probe, case)?.total;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric, GRAD_FLOOR));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs the quick suite. Each check is independent.
pub fn run_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(check("gradients", || {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let (m, c) = gradcheck_case(seed, LossWeights::default())?;
            worst = worst.max(gradient_check(&m, &c, 1e-5)?);
        }
        Ok((worst <= 1e-4, format!("max relative error {worst:.2e} over 20 seeds")))
    }));
    out.push(check("loss identities", || {
        let ln2 = 2f64.ln();
        let kl = symkl_alignment_loss(&[vec![0.0, 0.0], vec![2.0, 0.0]], 2, 1.0)?;
        let kl0 = symkl_alignment_loss(&[vec![1.0, 2.0], vec![1.0, 2.0]], 2, 1.0)?;
        let nce_neg = infonce_loss(&[1.0, 0.0], &[1.0, 1.0], &[vec![1.0, -1.0]], 2, 0.5)?;
        let nce_empty = infonce_loss(&[1.0, 0.0], &[0.0, 1.0], &[], 2, 0.5)?;
        let mi = mi_lower_bound_loss(&[0.0, 0.0], &[1.0, -1.0], &[-1.0, 1.0])?;
        let errs = [
            (kl - 2.0).abs(),
            kl0.abs(),
            (nce_neg - ln2).abs(),
            nce_empty.abs(),
            (mi - 2.0 * ln2).abs(),
        ];
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        Ok((worst <= 1e-9, format!("max deviation {worst:.1e}")))
    }));
    out.push(check("aggregation", || {
        let cfg = gradcheck_model_config();
        let mut r = rng::stream(11, &[]);
        let a = GlobalModel::init(&cfg, &mut r)?;
        let b = GlobalModel::init(&cfg, &mut r)?;
        let w = aggregation_weights(&[10, 10])?;
        let mean = aggregate(&[a.clone(), b.clone()], &w)?.flatten();
        let ok_mean = mean
            .iter()
            .zip(a.flatten().iter().zip(b.flatten()))
            .all(|(m, (x, y))| (m - (x + y) / 2.0).abs() <= f64::EPSILON * m.abs().max(f64::MIN_POSITIVE));
        let w3 = aggregation_weights(&[667, 667, 666])?;
        let fixed = aggregate(&[a.clone(), a.clone(), a.clone()], &w3)? == a;
        Ok((ok_mean && fixed, format!("mean within 1 ulp: {ok_mean}, fixed point: {fixed}")))
    }));
    out.push(check("link anchors", || {
        let mut r = rng::stream(12, &[]);
        let mut ok = (link1(0.0, 0.0, 0.0) - 2f64.ln()).abs() < 1e-12
            && link2(0.0, 0.0, 0.0).abs() < 1e-12
            && (link3(0.0, 0.0, 0.0) - 8.0).abs() < 1e-12;
        for _ in 0..10_000 {
            let s: [f64; 3] = [r.random_range(-40.0..40.0), r.random_range(-40.0..40.0), r.random_range(-40.0..40.0)];
            let dv = r.random_range(0.01..5.0);
            ok &= link1(s[0], s[1], s[2] + dv) > link1(s[0], s[1], s[2]);
            ok &= (link2(-s[0], -s[1], -s[2]) + link2(s[0], s[1], s[2])).abs() < 1e-12;
            ok &= (link3(-s[0], -s[1], -s[2]) - link3(s[0], s[1], s[2])).abs() < 1e-12;
        }
        Ok((ok, "anchors and 10000 symmetry/monotonicity draws".into()))
    }));
    out.push(check("reducers", || {
        let mut r = rng::stream(13, &[]);
        let (n, d_in, d) = (40, 12, 5);
        let x: Vec<f64> = (0..n * d_in).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut worst = 0.0f64;
        for red in [fit_pca(&x, n, d_in, d)?, fit_tsvd(&x, n, d_in, d)?] {
            let p = red.projection.data();
            for a in 0..d {
                for b in 0..d {
                    let dot: f64 = (0..d_in).map(|i| p[i * d + a] * p[i * d + b]).sum();
                    worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
                }
            }
        }
        let rp = fit_rp(512, 64, 3)?;
        let mut within = 0;
        for _ in 0..100 {
            let u: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut r)).collect();
            let v: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut r)).collect();
            let diff: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
            let pd = rp.transform(&diff)?;
            let ratio = pd.iter().map(|x| x * x).sum::<f64>() / diff.iter().map(|x| x * x).sum::<f64>();
            within += usize::from((0.6..=1.4).contains(&ratio));
        }
        Ok((
            worst <= 1e-8 && within >= 95,
            format!("orthonormality {worst:.1e}, JL pairs within 40%: {within}/100"),
        ))
    }));
    out.push(check("checkpoint", || {
        let m = GlobalModel::init(&gradcheck_model_config(), &mut rng::stream(14, &[]))?;
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&m)?)?;
        Ok((back == m, "byte round trip".into()))
    }));
    out
}
