//! Tri-modal Gaussian inputs with targets from stride-sampled statistics.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ModalSample, Standardizer};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{softplus, Tensor};

pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];
pub const TEXT_SHAPE: [usize; 2] = [10, 50];
pub const VECTOR_SHAPE: [usize; 1] = [32];

pub const IMAGE: &str = "image";
pub const TEXT: &str = "text";
pub const VECTOR: &str = "vector";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Link {
    Softplus,
    Tanh,
    Sech,
}

impl TryFrom<u8> for Link {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Link::Softplus),
            2 => Ok(Link::Tanh),
            3 => Ok(Link::Sech),
            other => Err(format!("link must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Link> for u8 {
    fn from(l: Link) -> u8 {
        match l {
            Link::Softplus => 1,
            Link::Tanh => 2,
            Link::Sech => 3,
        }
    }
}

impl Link {
    pub fn eval(self, s: [f64; 3]) -> f64 {
        let [a, b, c] = s;
        match self {
            Link::Softplus => link1(a, b, c),
            Link::Tanh => link2(a, b, c),
            Link::Sech => link3(a, b, c),
        }
    }
}

pub fn link1(s_img: f64, s_txt: f64, s_vec: f64) -> f64 {
    softplus(0.1 * s_img + 0.1 * s_txt + 0.1 * s_vec + 1e-4 * s_img * s_txt)
}

pub fn link2(s_img: f64, s_txt: f64, s_vec: f64) -> f64 {
    (0.05 * (s_img + s_txt + s_vec)).tanh()
}

pub fn link3(s_img: f64, s_txt: f64, s_vec: f64) -> f64 {
    let t = 0.02 * (s_img + s_txt + s_vec);
    // 16 / (e^t + e^-t), rewritten to stay finite for large |t|.
    let a = t.abs();
    16.0 * (-a).exp() / (1.0 + (-2.0 * a).exp())
}

/// Sum of the entries at flat positions 0, 10, 20, ...
pub fn stride_sum(flat: &[f64]) -> f64 {
    flat.iter().step_by(10).sum()
}

/// `(s_img, s_txt, s_vec)` over row-major flattened modalities.
pub fn stride_stats(sample: &ModalSample) -> Result<[f64; 3]> {
    let get = |name: &str| {
        sample
            .get(name)
            .map(|t| stride_sum(t.data()))
            .ok_or_else(|| Error::MissingModality(name.to_string()))
    };
    Ok([get(IMAGE)?, get(TEXT)?, get(VECTOR)?])
}

fn default_train() -> usize {
    2000
}
fn default_test() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    pub link: Link,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(link: Link, seed: u64) -> Self {
        SyntheticConfig {
            n_train: default_train(),
            n_test: default_test(),
            link,
            noise_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Draws `n_train + n_test` samples with i.i.d. standard normal entries and
/// zero targets.
pub fn gen_modalities(cfg: &SyntheticConfig) -> Result<Vec<ModalSample>> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, &[tag::DATA]);
    let mut draw = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    };
    Ok((0..cfg.n_train + cfg.n_test)
        .map(|_| {
            let img = draw(&IMAGE_SHAPE);
            let txt = draw(&TEXT_SHAPE);
            let vec = draw(&VECTOR_SHAPE);
            ModalSample::new(
                vec![(IMAGE.into(), img), (TEXT.into(), txt), (VECTOR.into(), vec)],
                0.0,
            )
        })
        .collect())
}

/// Applies the link (plus optional Gaussian noise), splits off the first
/// `n_train` samples for training and standardizes targets on that split.
pub fn attach_targets(mut samples: Vec<ModalSample>, cfg: &SyntheticConfig) -> Result<Dataset> {
    if samples.len() != cfg.n_train + cfg.n_test {
        return Err(Error::dim("attach_targets", &[samples.len()], &[cfg.n_train + cfg.n_test]));
    }
    let mut r = rng::stream(cfg.seed, &[tag::TARGET_NOISE]);
    let noise = (cfg.noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_std).expect("validated std"));
    for s in &mut samples {
        let y = cfg.link.eval(stride_stats(s)?);
        s.target = match &noise {
            Some(n) => y + n.sample(&mut r),
            None => y,
        };
    }
    let test = samples.split_off(cfg.n_train);
    Dataset {
        train: samples,
        test,
        target_scale: Standardizer::identity(),
    }
    .standardize_targets()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    attach_targets(gen_modalities(cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_anchors() {
        assert!((link1(0.0, 0.0, 0.0) - 2f64.ln()).abs() < 1e-12);
        let naive_softplus = |x: f64| (1.0 + x.exp()).ln();
        assert!((link1(1.0, 1.0, 1.0) - naive_softplus(0.3001)).abs() < 1e-12);
        assert_eq!(link2(0.0, 0.0, 0.0), 0.0);
        assert!((link2(20.0, 0.0, 0.0) - 0.761594).abs() < 1e-6);
        assert_eq!(link3(0.0, 0.0, 0.0), 8.0);
        let e = 1f64.exp();
        assert!((link3(50.0, 0.0, 0.0) - 16.0 / (e + 1.0 / e)).abs() < 1e-12);
        assert!(link3(1e6, 0.0, 0.0).is_finite());
    }

    #[test]
    fn stride_counting() {
        assert_eq!(stride_sum(&[1.0; 25]), 3.0);
        assert_eq!(stride_sum(&[1.0; 3072]), 308.0);
        assert_eq!(stride_sum(&[0.0; 500]), 0.0);
    }

    #[test]
    fn generation_is_seeded_and_shaped() {
        let cfg = SyntheticConfig {
            n_train: 20,
            n_test: 5,
            ..SyntheticConfig::new(Link::Tanh, 4)
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let s = &a.train[0];
        assert_eq!(s.get(IMAGE).unwrap().shape(), &[3, 32, 32]);
        assert_eq!(s.get(TEXT).unwrap().shape(), &[10, 50]);
        assert_eq!(s.get(VECTOR).unwrap().shape(), &[32]);
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.test.len(), 5);
    }

    #[test]
    fn test_targets_use_training_stats() {
        let cfg = SyntheticConfig {
            n_train: 50,
            n_test: 30,
            ..SyntheticConfig::new(Link::Softplus, 8)
        };
        let ds = generate(&cfg).unwrap();
        let ys: Vec<f64> = ds.train.iter().map(|s| s.target).collect();
        let mean = ys.iter().sum::<f64>() / 50.0;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        for s in &ds.test {
            let raw = Link::Softplus.eval(stride_stats(s).unwrap());
            assert!((ds.target_scale.apply(raw) - s.target).abs() < 1e-12);
        }
    }
}
