//! Run configuration: a strict JSON schema (unknown keys rejected) plus the
//! in-repo presets. Every run directory receives an exact echo of the
//! resolved config so runs can be replayed from the echo alone.

use serde::{Deserialize, Serialize};
use std::path::Path;

use flowgeo_core::corruption::{CorruptionModel, LinearOperator};
use flowgeo_core::dataset::{self, Dataset};
use flowgeo_core::error::{Error, Result};
use flowgeo_core::flow::FlowModel;
use flowgeo_core::posterior::PosteriorModel;
use flowgeo_core::training::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: &str = "1";

pub const PRESET_SINUSOID: &str = include_str!("../presets/sinusoid.json");
pub const PRESET_MNIST14: &str = include_str!("../presets/mnist14.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: String,
    pub experiment: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub corruption: CorruptionSpec,
    pub flow: FlowSpec,
    pub posterior: PosteriorSpec,
    pub train: TrainSpec,
    pub rae: RaeSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Sinusoid { n_corrupt: usize, n_clean: usize, sigma: f64 },
    MnistIdx { images: String, labels: String, take: usize, clean_count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionSpec {
    /// Identity operator; the noise scale comes from the dataset spec.
    Identity,
    Blur { kernel_size: usize, sigma_kernel: f64, noise_sigma: f64 },
    /// Dense operator loaded from an array manifest (first array).
    Dense { manifest: String, noise_sigma: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub dim: usize,
    pub layers: usize,
    pub degree: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case", deny_unknown_fields)]
pub enum PosteriorSpec {
    Sinusoid,
    Mnist14,
    Custom { meas_dim: usize, dim: usize, hidden: usize, width: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub vlb_samples: usize,
    pub lambda: f64,
    pub mu: f64,
    pub learning_rate: f64,
    /// Exactly one of `iterations` / `epochs` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Samples drawn from the learned prior for the tangent PCA.
    #[serde(default)]
    pub prior_samples: usize,
    /// Include the clean reference batch in the tangent PCA.
    #[serde(default)]
    pub use_clean_refs: bool,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sinusoid" => RunConfig::from_json(PRESET_SINUSOID),
            "mnist14" => RunConfig::from_json(PRESET_MNIST14),
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset `{other}` (available: sinusoid, mnist14)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: CONFIG_SCHEMA_VERSION.to_string(),
                found: self.schema_version.clone(),
                msg: "config schema_version".to_string(),
            });
        }
        match (self.train.iterations, self.train.epochs) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::invalid(
                    "config.train",
                    "set exactly one of `iterations` / `epochs`",
                ));
            }
            _ => {}
        }
        if self.train.epochs.is_some() && self.train.batch_size.is_none() {
            return Err(Error::invalid(
                "config.train",
                "`epochs` requires `batch_size`",
            ));
        }
        if self.rae.epsilon.is_none() && self.rae.latent_dim.is_none() {
            return Err(Error::invalid(
                "config.rae",
                "set `epsilon` or `latent_dim`",
            ));
        }
        if let DatasetSpec::Sinusoid { .. } = self.dataset {
            if !matches!(self.corruption, CorruptionSpec::Identity) {
                return Err(Error::invalid(
                    "config.corruption",
                    "the sinusoid dataset fixes the identity operator",
                ));
            }
        }
        Ok(())
    }

    /// Build the dataset and its corruption model.
    pub fn build_data(&self) -> Result<(Dataset, CorruptionModel)> {
        match &self.dataset {
            DatasetSpec::Sinusoid { n_corrupt, n_clean, sigma } => {
                dataset::make_sinusoid_dataset(*n_corrupt, *n_clean, *sigma, self.seed)
            }
            DatasetSpec::MnistIdx { images, labels, take, clean_count } => {
                let (imgs, _labels) =
                    dataset::load_mnist_idx(Path::new(images), Path::new(labels))?;
                let corruption = self.build_corruption()?;
                let ds = dataset::make_mnist_dataset(
                    &imgs,
                    *take,
                    *clean_count,
                    &corruption,
                    self.seed,
                )?;
                Ok((ds, corruption))
            }
        }
    }

    /// Corruption model implied by the spec (for commands that do not need
    /// the dataset).
    pub fn build_corruption(&self) -> Result<CorruptionModel> {
        match &self.corruption {
            CorruptionSpec::Identity => {
                let sigma = match &self.dataset {
                    DatasetSpec::Sinusoid { sigma, .. } => *sigma,
                    _ => 0.0,
                };
                CorruptionModel::new(LinearOperator::Identity { dim: self.flow.dim }, sigma)
            }
            CorruptionSpec::Blur { kernel_size, sigma_kernel, noise_sigma } => {
                let side = (self.flow.dim as f64).sqrt() as usize;
                if side * side != self.flow.dim {
                    return Err(Error::invalid(
                        "config.corruption",
                        format!("blur needs a square image; dim = {}", self.flow.dim),
                    ));
                }
                CorruptionModel::new(
                    LinearOperator::gaussian_blur(side, side, *kernel_size, *sigma_kernel),
                    *noise_sigma,
                )
            }
            CorruptionSpec::Dense { manifest, noise_sigma } => {
                let arrays = dataset::read_arrays(Path::new(manifest))?;
                let (_, a) = arrays.into_iter().next().ok_or_else(|| Error::Data {
                    source_name: manifest.clone(),
                    offset: 0,
                    msg: "manifest holds no arrays".to_string(),
                })?;
                CorruptionModel::new(LinearOperator::Dense(a), *noise_sigma)
            }
        }
    }

    pub fn build_flow(&self) -> FlowModel {
        use flowgeo_core::rng::{ChaCha8Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x666c_6f77); // "flow"
        FlowModel::init_random(self.flow.dim, self.flow.layers, self.flow.degree, &mut rng)
    }

    pub fn build_posterior(&self) -> Result<PosteriorModel> {
        let seed = self.seed ^ 0x706f_7374; // "post"
        Ok(match &self.posterior {
            PosteriorSpec::Sinusoid => PosteriorModel::build_sinusoid(seed),
            PosteriorSpec::Mnist14 => PosteriorModel::build_mnist14(seed),
            PosteriorSpec::Custom { meas_dim, dim, hidden, width } => {
                PosteriorModel::new(*meas_dim, *dim, *hidden, *width, None, seed)?
            }
        })
    }

    /// Resolve iterations/epochs into the core training config.
    pub fn train_config(&self, dataset_len: usize) -> Result<TrainConfig> {
        let iterations = match (self.train.iterations, self.train.epochs) {
            (Some(it), None) => it,
            (None, Some(ep)) => {
                let bs = self.train.batch_size.expect("validated");
                ep * dataset_len.div_ceil(bs)
            }
            _ => unreachable!("validated"),
        };
        Ok(TrainConfig {
            vlb_samples: self.train.vlb_samples,
            lambda: self.train.lambda,
            mu: self.train.mu,
            learning_rate: self.train.learning_rate,
            iterations,
            batch_size: self.train.batch_size,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
        })
    }
}
