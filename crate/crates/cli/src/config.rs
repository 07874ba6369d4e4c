//! JSON experiment configuration. Everything a run needs lives in one
//! document; unknown keys are rejected so typos fail loudly instead of
//! silently falling back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use advlab_core::data::{load_idx, synth_gaussians, Split};
use advlab_core::{Activation, Dataset, ModelSpec, NamedAttack, TrainPlan};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Two-class-or-more Gaussian blobs in the unit box.
    Synthetic {
        dim: usize,
        classes: usize,
        train_count: usize,
        test_count: usize,
        separation: f64,
        noise: f64,
        seed: u64,
    },
    /// IDX image/label file pairs (the MNIST binary layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Truncate the training split to this many samples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset), CliError> {
        match self {
            DatasetConfig::Synthetic {
                dim,
                classes,
                train_count,
                test_count,
                separation,
                noise,
                seed,
            } => {
                let mut train = synth_gaussians(*dim, *classes, *train_count, *separation, *noise, *seed);
                let mut test =
                    synth_gaussians(*dim, *classes, *test_count, *separation, *noise, seed.wrapping_add(1));
                train.split = Split::Train;
                test.split = Split::Test;
                Ok((train, test))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.exists() {
                        return Err(CliError::Config(format!(
                            "dataset file not found: {}",
                            p.display()
                        )));
                    }
                }
                let mut train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                train.split = Split::Train;
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            DatasetConfig::Synthetic { dim, .. } => Some(*dim),
            DatasetConfig::Idx { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if let DatasetConfig::Synthetic {
            dim,
            classes,
            train_count,
            test_count,
            separation,
            noise,
            ..
        } = self
        {
            if *dim == 0 || *classes < 2 || *train_count == 0 || *test_count == 0 {
                return Err(CliError::Config(
                    "synthetic dataset needs dim >= 1, classes >= 2 and non-empty splits".into(),
                ));
            }
            if !separation.is_finite() || !noise.is_finite() || *separation < 0.0 || *noise < 0.0 {
                return Err(CliError::Config(
                    "synthetic dataset separation/noise must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub init_seed: u64,
    pub plan: TrainPlan,
    /// Default output directory; the --out flag overrides it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.plan.validate()?;
        if let Some(d) = self.dataset.dim() {
            if self.model.input_dim() != d {
                return Err(CliError::Config(format!(
                    "model expects {} inputs but dataset has dimension {d}",
                    self.model.input_dim()
                )));
            }
        }
        Ok(())
    }

    /// Folds a --seed override into every run-level seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.init_seed = seed;
        self.plan.shuffle_seed = seed.wrapping_add(1);
        self.plan.metric_seed = seed.wrapping_add(2);
    }
}

/// Config for standalone attack evaluation against a saved checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub checkpoint: PathBuf,
    pub dataset: DatasetConfig,
    /// Which split to attack.
    #[serde(default = "default_split")]
    pub split: Split,
    /// Evaluate only the first n samples of the metric order.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
    pub attack: NamedAttack,
    /// Reference maximizer for the effectiveness column; defaults to
    /// PGD50 at the attack's budget.
    #[serde(default)]
    pub reference: Option<NamedAttack>,
}

fn default_split() -> Split {
    Split::Test
}

/// Config for landscape probes against a saved checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub checkpoint: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default = "default_split")]
    pub split: Split,
    pub epsilon: f64,
    #[serde(default = "default_subset")]
    pub subset: usize,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default = "default_hs_k")]
    pub hs_k: usize,
    #[serde(default = "default_hs_iters")]
    pub hs_iters: usize,
    #[serde(default = "default_hs_tol")]
    pub hs_tol: f64,
    #[serde(default)]
    pub compute_hs: Option<bool>,
}

fn default_subset() -> usize {
    200
}

fn default_hs_k() -> usize {
    20
}

fn default_hs_iters() -> usize {
    200
}

fn default_hs_tol() -> f64 {
    1e-4
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}
