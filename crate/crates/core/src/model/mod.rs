//! Per-modality encoders, fusion and the regression head, bundled as one
//! parameter set that is broadcast, trained locally and averaged.

pub mod checkpoint;
pub mod conv;
pub mod fusion;
pub mod head;
pub mod layers;
pub mod lstm;
pub mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conv::{ConvEncoder, ConvEncoderParams};
pub use fusion::{FusionMode, FusionParams};
pub use head::{Head, HeadParams};
pub use layers::{Activation, Dense, Layout};
pub use lstm::{LstmCell, LstmEncoder, LstmEncoderParams};
pub use mlp::{MlpEncoder, MlpEncoderParams};

use crate::datagen::{Batch, ModalSample};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderConfig {
    Vector {
        input_dim: usize,
        #[serde(default = "default_mlp_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    Image {
        /// Channel-first `(C, H, W)`.
        input_shape: [usize; 3],
        #[serde(default = "default_channels")]
        channels: Vec<usize>,
        #[serde(default = "default_kernels")]
        kernel_sizes: Vec<usize>,
        #[serde(default = "default_pool")]
        pool_stride: usize,
        #[serde(default = "default_fc")]
        fc_dim: usize,
    },
    Sequence {
        input_dim: usize,
        #[serde(default = "default_lstm_hidden")]
        hidden_dim: usize,
        #[serde(default = "default_true")]
        bidirectional: bool,
    },
    /// Features pass through unchanged; output width equals `input_dim`.
    Identity { input_dim: usize },
}

fn default_mlp_hidden() -> Vec<usize> {
    vec![64]
}
fn default_channels() -> Vec<usize> {
    vec![8, 16]
}
fn default_kernels() -> Vec<usize> {
    vec![3, 2]
}
fn default_pool() -> usize {
    2
}
fn default_fc() -> usize {
    32
}
fn default_lstm_hidden() -> usize {
    32
}
fn default_true() -> bool {
    true
}
fn default_latent() -> usize {
    16
}
fn default_head_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<ModalityConfig>,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
}

impl EncoderConfig {
    fn output_dim(&self, latent: usize) -> usize {
        match self {
            EncoderConfig::Identity { input_dim } => *input_dim,
            _ => latent,
        }
    }
}

impl ModelConfig {
    /// Width of the representation the head reads.
    pub fn head_input_dim(&self) -> usize {
        match self.fusion {
            FusionMode::None => self
                .modalities
                .first()
                .map(|m| m.encoder.output_dim(self.latent_dim))
                .unwrap_or(0),
            _ => self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality '{}'", m.name)));
            }
            let out = m.encoder.output_dim(self.latent_dim);
            if self.fusion != FusionMode::None && out != self.latent_dim {
                return Err(Error::Config(format!(
                    "modality '{}' emits {out} features but latent_dim is {}",
                    m.name, self.latent_dim
                )));
            }
        }
        if self.fusion == FusionMode::None && self.modalities.len() != 1 {
            return Err(Error::Config("fusion = none requires exactly one modality".into()));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.modalities.iter().map(|m| m.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder<P> {
    Vector(MlpEncoder<P>),
    Image(ConvEncoder<P>),
    Sequence(LstmEncoder<P>),
    Identity(usize),
}

impl Encoder<Tensor> {
    fn init(cfg: &EncoderConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match cfg {
            EncoderConfig::Vector {
                input_dim,
                hidden,
                activation,
            } => Encoder::Vector(MlpEncoder::init(*input_dim, hidden, d, *activation, rng)),
            EncoderConfig::Image {
                input_shape,
                channels,
                kernel_sizes,
                pool_stride,
                fc_dim,
            } => Encoder::Image(ConvEncoder::init(
                *input_shape,
                channels,
                kernel_sizes,
                *pool_stride,
                *fc_dim,
                d,
                rng,
            )?),
            EncoderConfig::Sequence {
                input_dim,
                hidden_dim,
                bidirectional,
            } => Encoder::Sequence(LstmEncoder::init(
                *input_dim,
                *hidden_dim,
                d,
                *bidirectional,
                rng,
            )),
            EncoderConfig::Identity { input_dim } => Encoder::Identity(*input_dim),
        })
    }

    /// Encodes one sample of this modality.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Encoder::Vector(e) => e.encode(x),
            Encoder::Image(e) => e.encode(x),
            Encoder::Sequence(e) => e.encode(x),
            Encoder::Identity(d) => {
                if x.len() != *d {
                    return Err(Error::dim("identity encoder", x.shape(), &[*d]));
                }
                Ok(Tensor::vector(x.data().to_vec()))
            }
        }
    }
}

impl<P> Encoder<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Encoder<Q> {
        match self {
            Encoder::Vector(e) => Encoder::Vector(e.map(f)),
            Encoder::Image(e) => Encoder::Image(e.map(f)),
            Encoder::Sequence(e) => Encoder::Sequence(e.map(f)),
            Encoder::Identity(d) => Encoder::Identity(*d),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        match self {
            Encoder::Vector(e) => e.visit(prefix, f),
            Encoder::Image(e) => e.visit(prefix, f),
            Encoder::Sequence(e) => e.visit(prefix, f),
            Encoder::Identity(_) => {}
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        match self {
            Encoder::Vector(e) => e.visit_mut(prefix, f),
            Encoder::Image(e) => e.visit_mut(prefix, f),
            Encoder::Sequence(e) => e.visit_mut(prefix, f),
            Encoder::Identity(_) => {}
        }
    }
}

impl Encoder<Var> {
    /// `data` holds `batch` samples of `sample_shape`, contiguous.
    fn forward(
        &self,
        tape: &mut Tape,
        batch: usize,
        sample_shape: &[usize],
        data: &[f64],
    ) -> Result<Var> {
        let width: usize = sample_shape.iter().product();
        match self {
            Encoder::Vector(e) => {
                let x = tape.constant(vec![batch, width], data.to_vec())?;
                e.forward(tape, x)
            }
            Encoder::Image(e) => e.forward(tape, batch, data),
            Encoder::Sequence(e) => {
                let steps = match sample_shape {
                    [t, _] => *t,
                    [t] => *t,
                    other => return Err(Error::dim("encode_sequence", other, &[0, e.input_dim])),
                };
                e.forward(tape, batch, steps, data)
            }
            Encoder::Identity(d) => {
                if width != *d {
                    return Err(Error::dim("identity encoder", sample_shape, &[*d]));
                }
                tape.constant(vec![batch, width], data.to_vec())
            }
        }
    }
}

/// The complete parameter set: encoders in configured modality order, the
/// fusion parameters (absent for `FusionMode::None`) and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<P> {
    pub config: ModelConfig,
    pub encoders: Vec<Encoder<P>>,
    pub fusion: Option<FusionParams<P>>,
    pub head: Head<P>,
}

pub type GlobalModel = Model<Tensor>;

/// Intermediate values of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Per-modality features, each `[B×d]`.
    pub features: Vec<Var>,
    /// Fused representation `[B×d]`.
    pub fused: Var,
    /// Predictions `[B×1]`.
    pub prediction: Var,
}

/// Single-sample result of [`Model::forward_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleForward {
    pub features: Vec<Tensor>,
    pub fused: Tensor,
    pub prediction: f64,
}

impl Model<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let encoders = config
            .modalities
            .iter()
            .map(|m| Encoder::init(&m.encoder, d, rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = match config.fusion {
            FusionMode::None => None,
            _ => Some(FusionParams::init(d, rng)),
        };
        let head = Head::init(config.head_input_dim(), &config.head_hidden, rng);
        Ok(Model {
            config: config.clone(),
            encoders,
            fusion,
            head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.encoders.len() != self.config.modalities.len() {
            return Err(Error::Consistency("encoder count differs from config".into()));
        }
        for e in &self.encoders {
            match e {
                Encoder::Vector(m) => m.validate()?,
                Encoder::Image(c) => c.validate()?,
                Encoder::Sequence(l) => l.validate()?,
                Encoder::Identity(_) => {}
            }
        }
        if let Some(f) = &self.fusion {
            f.validate()?;
        }
        self.head.validate()
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Parameters concatenated in the fixed visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites all parameters from a flat array produced by [`flatten`].
    ///
    /// [`flatten`]: Model::flatten
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::Consistency(format!(
                "parameter count {} does not match model's {n}",
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_mut(&mut |_, t| {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        });
        Ok(())
    }

    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut m = Model::init(config, &mut crate::rng::stream(0, &[]))?;
        m.load_flat(flat)?;
        Ok(m)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }

    /// Records every parameter on `tape`; trainable ones accumulate gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Model<Var> {
        if trainable {
            self.map(&mut |t| tape.param(t))
        } else {
            self.map(&mut |t| {
                tape.constant(t.shape().to_vec(), t.data().to_vec())
                    .expect("valid shape")
            })
        }
    }

    /// Copies gradients of `bound` into each parameter's `grad` buffer.
    /// Parameters the loss does not reach get zero gradients.
    pub fn store_grads(&mut self, bound: &Model<Var>, grads: &Gradients) {
        let mut vars = Vec::new();
        bound.visit(&mut |_, v| vars.push(*v));
        let mut it = vars.into_iter();
        self.visit_mut(&mut |_, t| {
            let v = it.next().expect("same structure");
            t.grad = Some(grads.get_or_zeros(v, t.len()));
        });
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, t| out.push((n, t)));
        out
    }

    /// Runs the model on a batch without recording gradients.
    pub fn infer(&self, batch: &Batch) -> Result<BatchOutputs> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fv = bound.forward_batch(&mut tape, batch)?;
        Ok(BatchOutputs {
            fused: tape.data(fv.fused).to_vec(),
            predictions: tape.data(fv.prediction).to_vec(),
            dim: tape.shape(fv.fused)[1],
        })
    }

    /// Predictions and fused representations for many samples, in chunks.
    pub fn infer_all(&self, samples: &[ModalSample], chunk: usize) -> Result<BatchOutputs> {
        let names = self.config.names();
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut out = BatchOutputs {
            fused: Vec::new(),
            predictions: Vec::new(),
            dim: self.config.head_input_dim(),
        };
        for part in idx.chunks(chunk.max(1)) {
            let batch = Batch::gather(samples, part, &names)?;
            let o = self.infer(&batch)?;
            out.fused.extend(o.fused);
            out.predictions.extend(o.predictions);
        }
        Ok(out)
    }

    pub fn forward_sample(&self, sample: &ModalSample) -> Result<SampleForward> {
        let batch = Batch::gather(std::slice::from_ref(sample), &[0], &self.config.names())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fv = bound.forward_batch(&mut tape, &batch)?;
        Ok(SampleForward {
            features: fv
                .features
                .iter()
                .map(|&v| Tensor::vector(tape.data(v).to_vec()))
                .collect(),
            fused: Tensor::vector(tape.data(fv.fused).to_vec()),
            prediction: tape.data(fv.prediction)[0],
        })
    }

    pub fn predict(&self, sample: &ModalSample) -> Result<f64> {
        Ok(self.forward_sample(sample)?.prediction)
    }
}

/// Outputs of an inference pass: `fused` is `[n×dim]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs {
    pub fused: Vec<f64>,
    pub predictions: Vec<f64>,
    pub dim: usize,
}

impl<P> Model<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Model<Q> {
        Model {
            config: self.config.clone(),
            encoders: self.encoders.iter().map(|e| e.map(f)).collect(),
            fusion: self.fusion.as_ref().map(|p| p.map(f)),
            head: self.head.map(f),
        }
    }

    /// Visits parameters in the canonical order: encoders (config order),
    /// fusion, head.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        for (m, e) in self.config.modalities.iter().zip(&self.encoders) {
            e.visit(&format!("enc.{}", m.name), f);
        }
        if let Some(p) = &self.fusion {
            p.visit("fusion", f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut P)) {
        let Model {
            config,
            encoders,
            fusion,
            head,
        } = self;
        for (m, e) in config.modalities.iter().zip(encoders.iter_mut()) {
            e.visit_mut(&format!("enc.{}", m.name), f);
        }
        if let Some(p) = fusion {
            p.visit_mut("fusion", f);
        }
        head.visit_mut("head", f);
    }
}

impl Model<Var> {
    pub fn forward_batch(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardVars> {
        let mut feats = Vec::with_capacity(self.encoders.len());
        for (m, e) in self.config.modalities.iter().zip(&self.encoders) {
            let input = batch
                .modality(&m.name)
                .ok_or_else(|| Error::MissingModality(m.name.clone()))?;
            let z = e.forward(tape, batch.size, &input.sample_shape, &input.data)?;
            feats.push(z);
        }
        let fused = match &self.fusion {
            Some(p) => p.forward(tape, self.config.fusion, &feats)?,
            None => feats[0],
        };
        let prediction = self.head.forward(tape, fused)?;
        Ok(ForwardVars {
            features: feats,
            fused,
            prediction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            modalities: vec![
                ModalityConfig {
                    name: "image".into(),
                    encoder: EncoderConfig::Image {
                        input_shape: [2, 6, 6],
                        channels: vec![2],
                        kernel_sizes: vec![3],
                        pool_stride: 2,
                        fc_dim: 4,
                    },
                },
                ModalityConfig {
                    name: "text".into(),
                    encoder: EncoderConfig::Sequence {
                        input_dim: 3,
                        hidden_dim: 3,
                        bidirectional: true,
                    },
                },
                ModalityConfig {
                    name: "vector".into(),
                    encoder: EncoderConfig::Vector {
                        input_dim: 5,
                        hidden: vec![4],
                        activation: Activation::Tanh,
                    },
                },
            ],
            latent_dim: 3,
            fusion: FusionMode::Attention,
            head_hidden: vec![4],
        }
    }

    fn sample(seed: u64) -> ModalSample {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::stream(seed, &[]);
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        ModalSample::new(
            vec![
                ("image".into(), draw(&[2, 6, 6])),
                ("text".into(), draw(&[4, 3])),
                ("vector".into(), draw(&[5])),
            ],
            0.5,
        )
    }

    #[test]
    fn flatten_roundtrip_is_bitwise() {
        let cfg = small_config();
        let m = Model::init(&cfg, &mut rng::stream(1, &[])).unwrap();
        m.validate().unwrap();
        let flat = m.flatten();
        assert_eq!(flat.len(), m.num_params());
        let back = Model::from_flat(&cfg, &flat).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn composition_matches_separate_stages() {
        let cfg = small_config();
        let m = Model::init(&cfg, &mut rng::stream(2, &[])).unwrap();
        let s = sample(3);
        let out = m.forward_sample(&s).unwrap();
        let z: Vec<Tensor> = cfg
            .modalities
            .iter()
            .zip(&m.encoders)
            .map(|(mc, e)| e.encode(s.get(&mc.name).unwrap()).unwrap())
            .collect();
        let fused = m.fusion.as_ref().unwrap().fuse(cfg.fusion, &z).unwrap();
        let y = m.head.predict(&fused).unwrap();
        for (a, b) in out.features.iter().zip(&z) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in out.fused.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((out.prediction - y).abs() < 1e-14);
    }

    #[test]
    fn zero_model_yields_bias_derived_output() {
        let cfg = small_config();
        let mut m = Model::init(&cfg, &mut rng::stream(4, &[])).unwrap();
        let b_fusion = m.fusion.as_ref().unwrap().b_fusion.clone();
        m.visit_mut(&mut |name, t| {
            if !name.starts_with("fusion.b") && !name.starts_with("head") {
                t.data_mut().fill(0.0);
            }
        });
        let out = m.forward_sample(&sample(5)).unwrap();
        for f in &out.features {
            assert!(f.data().iter().all(|v| *v == 0.0));
        }
        assert_eq!(out.fused.data(), b_fusion.data());
        assert_eq!(out.prediction, m.head.predict(&b_fusion).unwrap());
    }

    #[test]
    fn missing_modality_is_named() {
        let cfg = small_config();
        let m = Model::init(&cfg, &mut rng::stream(6, &[])).unwrap();
        let mut s = sample(7);
        s.modalities.remove("text");
        match m.forward_sample(&s) {
            Err(Error::MissingModality(name)) => assert_eq!(name, "text"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batched_forward_matches_per_sample() {
        let cfg = small_config();
        let m = Model::init(&cfg, &mut rng::stream(8, &[])).unwrap();
        let samples: Vec<_> = (0..5).map(|i| sample(20 + i)).collect();
        let all = m.infer_all(&samples, 2).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let one = m.forward_sample(s).unwrap();
            assert!((all.predictions[i] - one.prediction).abs() < 1e-14);
        }
    }

    #[test]
    fn passthrough_requires_one_modality() {
        let mut cfg = small_config();
        cfg.fusion = FusionMode::None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
