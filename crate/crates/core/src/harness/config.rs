//! TOML experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{synthetic, Link, NirSchema, PartitionScheme};
use crate::error::{Error, Result};
use crate::fedsim::RoundConfig;
use crate::losses::LossWeights;
use crate::model::{Activation, EncoderConfig, FusionMode, ModalityConfig, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fdrmfl,
    Pca,
    Tsvd,
    Rp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fdrmfl, Method::Pca, Method::Tsvd, Method::Rp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fdrmfl => "fdrmfl",
            Method::Pca => "pca",
            Method::Tsvd => "tsvd",
            Method::Rp => "rp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected fdrmfl, pca, tsvd or rp)")))
    }
}

/// Comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty method list".into()));
    }
    Ok(out)
}

fn default_links() -> Vec<Link> {
    vec![Link::Tanh]
}
fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}
fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        /// One scenario per link.
        #[serde(default = "default_links")]
        links: Vec<Link>,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default)]
        noise_std: f64,
    },
    Nir {
        /// Name used as the scenario prefix.
        name: String,
        /// Relative paths resolve against the config file's directory.
        #[serde(default)]
        path: Option<PathBuf>,
        /// Environment variable that overrides `path` when set.
        #[serde(default)]
        path_env: Option<String>,
        #[serde(default)]
        spectrum_columns: Option<Vec<String>>,
        #[serde(default)]
        spectrum_prefix: Option<String>,
        #[serde(default)]
        spectrum_range: Option<[String; 2]>,
        /// Scalar chemical components. Each rotation predicts one of them
        /// from the spectrum and the rest.
        components: Vec<String>,
        /// Components used as targets; defaults to all of them.
        #[serde(default)]
        targets: Option<Vec<String>>,
        #[serde(default)]
        expected_rows: Option<usize>,
        #[serde(default)]
        expected_wavelengths: Option<usize>,
        #[serde(default)]
        spectrum_as_vector: bool,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// `path` holds generated stand-in data rather than the real table.
        #[serde(default)]
        standin: bool,
    },
}

fn default_latent() -> usize {
    16
}
fn default_head() -> Vec<usize> {
    vec![32]
}
fn default_mlp() -> Vec<usize> {
    vec![64]
}
fn default_lstm() -> usize {
    32
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

/// Architecture knobs shared by every modality of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default = "default_head")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_mlp")]
    pub mlp_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_lstm")]
    pub lstm_hidden: usize,
    /// Defaults to bidirectional for text and unidirectional for spectra.
    #[serde(default)]
    pub bidirectional: Option<bool>,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_pool")]
    pub pool_stride: usize,
    #[serde(default = "default_fc")]
    pub fc_dim: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

fn default_repeats() -> usize {
    10
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_reduced_dim() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionScheme,
    #[serde(default)]
    pub round: RoundConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// First seed; repeat `r` uses `seed + r`.
    #[serde(default)]
    pub seed: u64,
    /// Width of each reduced modality for the linear baselines.
    #[serde(default = "default_reduced_dim")]
    pub reduced_dim: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Extra lines for the markdown report.
    #[serde(default)]
    pub notes: Vec<String>,
    /// Directory of the config file, for resolving relative data paths.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// A single link-2 synthetic scenario with every default.
    fn default() -> Self {
        toml::from_str("[dataset]\nkind = \"synthetic\"\n").expect("valid default")
    }
}

/// One dataset realization recipe within a config.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Synthetic { link: Link },
    Nir { target: String },
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.reduced_dim == 0 {
            return Err(Error::Config("reduced_dim must be positive".into()));
        }
        self.round.validate()?;
        self.loss.validate()?;
        match &self.dataset {
            DatasetSpec::Synthetic { links, n_train, n_test, noise_std } => {
                if links.is_empty() {
                    return Err(Error::Config("synthetic dataset needs at least one link".into()));
                }
                if *n_train == 0 || *n_test == 0 || !(*noise_std >= 0.0) {
                    return Err(Error::Config("invalid synthetic sizes or noise".into()));
                }
            }
            DatasetSpec::Nir { components, targets, .. } => {
                if components.len() < 2 {
                    return Err(Error::Config("nir rotation needs at least two components".into()));
                }
                for t in targets.iter().flatten() {
                    if !components.contains(t) {
                        return Err(Error::Config(format!("target '{t}' is not a listed component")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        match &self.dataset {
            DatasetSpec::Synthetic { links, .. } => {
                links.iter().map(|&link| Scenario::Synthetic { link }).collect()
            }
            DatasetSpec::Nir { components, targets, .. } => targets
                .clone()
                .unwrap_or_else(|| components.clone())
                .into_iter()
                .map(|target| Scenario::Nir { target })
                .collect(),
        }
    }

    pub fn scenario_name(&self, s: &Scenario) -> String {
        match (s, &self.dataset) {
            (Scenario::Synthetic { link }, _) => format!("link{}", u8::from(*link)),
            (Scenario::Nir { target }, DatasetSpec::Nir { name, .. }) => format!("{name}:{target}"),
            (Scenario::Nir { target }, _) => target.clone(),
        }
    }

    /// Resolved CSV path for NIR datasets.
    pub fn nir_path(&self) -> Result<PathBuf> {
        self.nir_source().map(|(p, _)| p)
    }

    /// Resolved CSV path and whether it is the stand-in fallback.
    pub fn nir_source(&self) -> Result<(PathBuf, bool)> {
        let DatasetSpec::Nir { path, path_env, name, standin, .. } = &self.dataset else {
            return Err(Error::Config("not a NIR dataset".into()));
        };
        if let Some(var) = path_env {
            if let Some(v) = std::env::var_os(var).filter(|v| !v.is_empty()) {
                return Ok((PathBuf::from(v), false));
            }
        }
        let p = path.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "no CSV for dataset '{name}': set `path`{}",
                path_env.as_ref().map(|v| format!(" or ${v}")).unwrap_or_default()
            ))
        })?;
        let resolved = match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.clone(),
        };
        Ok((resolved, *standin))
    }

    pub fn nir_schema(&self, target: &str) -> Result<NirSchema> {
        match &self.dataset {
            DatasetSpec::Nir {
                spectrum_columns,
                spectrum_prefix,
                spectrum_range,
                components,
                expected_rows,
                expected_wavelengths,
                spectrum_as_vector,
                test_fraction,
                ..
            } => Ok(NirSchema {
                spectrum_columns: spectrum_columns.clone(),
                spectrum_prefix: spectrum_prefix.clone(),
                spectrum_range: spectrum_range.clone(),
                scalar_columns: components.iter().filter(|c| *c != target).cloned().collect(),
                target_column: target.to_string(),
                expected_rows: *expected_rows,
                expected_wavelengths: *expected_wavelengths,
                spectrum_as_vector: *spectrum_as_vector,
                test_fraction: *test_fraction,
            }),
            _ => Err(Error::Config("not a NIR dataset".into())),
        }
    }

    pub fn synthetic_config(&self, link: Link, seed: u64) -> Result<synthetic::SyntheticConfig> {
        match &self.dataset {
            DatasetSpec::Synthetic { n_train, n_test, noise_std, .. } => Ok(synthetic::SyntheticConfig {
                n_train: *n_train,
                n_test: *n_test,
                link,
                noise_std: *noise_std,
                seed,
            }),
            _ => Err(Error::Config("not a synthetic dataset".into())),
        }
    }

    fn vector_encoder(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig::Vector {
            input_dim,
            hidden: self.model.mlp_hidden.clone(),
            activation: self.model.activation,
        }
    }

    /// Model for this config's modality layout.
    pub fn model_config(&self, spectrum_len: Option<usize>, scalar_count: Option<usize>) -> Result<ModelConfig> {
        let m = &self.model;
        let modalities = match &self.dataset {
            DatasetSpec::Synthetic { .. } => vec![
                ModalityConfig {
                    name: synthetic::IMAGE.into(),
                    encoder: EncoderConfig::Image {
                        input_shape: synthetic::IMAGE_SHAPE,
                        channels: m.channels.clone(),
                        kernel_sizes: m.kernel_sizes.clone(),
                        pool_stride: m.pool_stride,
                        fc_dim: m.fc_dim,
                    },
                },
                ModalityConfig {
                    name: synthetic::TEXT.into(),
                    encoder: EncoderConfig::Sequence {
                        input_dim: synthetic::TEXT_SHAPE[1],
                        hidden_dim: m.lstm_hidden,
                        bidirectional: m.bidirectional.unwrap_or(true),
                    },
                },
                ModalityConfig {
                    name: synthetic::VECTOR.into(),
                    encoder: self.vector_encoder(synthetic::VECTOR_SHAPE[0]),
                },
            ],
            DatasetSpec::Nir { spectrum_as_vector, .. } => {
                let t = spectrum_len.ok_or_else(|| Error::Config("spectrum length unknown".into()))?;
                let k = scalar_count.ok_or_else(|| Error::Config("scalar count unknown".into()))?;
                let spectrum = if *spectrum_as_vector {
                    self.vector_encoder(t)
                } else {
                    EncoderConfig::Sequence {
                        input_dim: 1,
                        hidden_dim: m.lstm_hidden,
                        bidirectional: m.bidirectional.unwrap_or(false),
                    }
                };
                vec![
                    ModalityConfig {
                        name: crate::datagen::nir::SPECTRUM.into(),
                        encoder: spectrum,
                    },
                    ModalityConfig {
                        name: crate::datagen::nir::SCALARS.into(),
                        encoder: self.vector_encoder(k),
                    },
                ]
            }
        };
        let cfg = ModelConfig {
            modalities,
            latent_dim: m.latent_dim,
            fusion: m.fusion,
            head_hidden: m.head_hidden.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Key/value block echoed at the top of every report.
    pub fn hyperparameters(&self) -> Vec<(String, String)> {
        let l = &self.loss;
        let r = &self.round;
        let mut out = vec![
            ("lambda1", l.lambda1.to_string()),
            ("lambda2", l.lambda2.to_string()),
            ("lambda3", l.lambda3.to_string()),
            ("tau", l.tau.to_string()),
            ("sigma", l.sigma.to_string()),
            ("history_size", l.history_size.to_string()),
            ("latent_dim", self.model.latent_dim.to_string()),
            ("reduced_dim", self.reduced_dim.to_string()),
            ("rounds", r.rounds.to_string()),
            ("local_epochs", r.local_epochs.to_string()),
            ("batch_size", r.batch_size.to_string()),
            ("learning_rate", r.learning_rate.to_string()),
            ("clients", r.clients.to_string()),
            (
                "partition",
                match self.partition {
                    PartitionScheme::Uniform => "uniform",
                    PartitionScheme::LabelSortedShards => "label_sorted_shards",
                }
                .to_string(),
            ),
            ("repeats", self.repeats.to_string()),
            ("seed", self.seed.to_string()),
        ];
        if let DatasetSpec::Synthetic { n_train, n_test, noise_std, .. } = &self.dataset {
            out.push(("n_train", n_train.to_string()));
            out.push(("n_test", n_test.to_string()));
            out.push(("noise_std", noise_std.to_string()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
