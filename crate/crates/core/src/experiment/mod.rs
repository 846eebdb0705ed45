//! Experiment runner: JSON specs describing a dataset, model, training
//! configuration and protocol, executed into an output directory of CSV
//! and JSON artifacts.
//!
//! Artifacts of a `train` or `semi_supervised` run:
//!
//! * `metrics.csv`: `epoch,step,train_elbo,test_elbo,epsilon,accuracy`,
//!   reproducible byte for byte under a fixed spec.
//! * `timing.csv`: `epoch,wall_ms,median_batch_ms` from a monotonic clock.
//! * `checkpoint.bin` / `checkpoint.json`: state after the last epoch; a
//!   rerun resumes from it.
//! * `summary.json`: `final_test_loss`, `wall_seconds`, `config_hash` and
//!   run details.

mod fetch;
mod run;

pub use fetch::{fetch, fetch_from, DatasetName, RemoteFile, FASHION_BASE_URL, FASHION_FILES, MNIST_BASE_URL, MNIST_FILES};
pub use run::{run, run_with_progress, Summary};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{BinarizeMode, SyntheticKind};
use crate::dvae::{ModelSpec, PairwiseKind, TrainConfig};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "ARGMAXGRAD_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    BiasVariance,
    StructuredCompare,
    SemiSupervised,
}

fn default_binarize() -> BinarizeMode {
    BinarizeMode::Threshold
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    /// A directory in the MNIST distribution layout (raw or `.gz` names).
    Idx {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default = "default_binarize")]
        binarize: BinarizeMode,
        #[serde(default)]
        binarize_seed: u64,
    },
    /// Generated data; the first `train` images train, the next `test`
    /// evaluate.
    Synthetic {
        generator: SyntheticKind,
        train: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
    },
}

/// One estimator swept over bias knobs (empty `knobs` for knob-free
/// estimators).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSweep {
    pub variant: EstimatorKind,
    #[serde(default)]
    pub knobs: Vec<f64>,
}

fn default_profile_images() -> usize {
    100
}

fn default_trials() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasVarianceSpec {
    /// Leading training images the gradients are profiled on. The model is
    /// fit to the full training split first.
    #[serde(default = "default_profile_images")]
    pub images: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub sweeps: Vec<ProfileSweep>,
}

fn default_pairwise() -> Vec<PairwiseKind> {
    vec![PairwiseKind::None, PairwiseKind::Supermodular, PairwiseKind::General]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredCompareSpec {
    #[serde(default = "default_pairwise")]
    pub variants: Vec<PairwiseKind>,
}

fn default_mc() -> usize {
    1
}

fn default_checkpoint_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub output: PathBuf,
    /// Gumbel draws per test image in evaluation.
    #[serde(default = "default_mc")]
    pub eval_mc_samples: usize,
    /// Epochs between checkpoints (the final epoch is always saved).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub bias_variance: Option<BiasVarianceSpec>,
    #[serde(default)]
    pub structured: Option<StructuredCompareSpec>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parse `text`, apply `key=value` overrides (dotted paths, values
    /// parsed as JSON or else taken as strings), then the seed environment
    /// override.
    pub fn from_json_with_overrides(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("spec: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {seed:?}")))?;
            apply_override(&mut value, &format!("train.seed={seed}"))?;
        }
        let spec: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("specs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.latent.validate()?;
        self.train.validate()?;
        if self.eval_mc_samples == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("eval_mc_samples and checkpoint_every must be >= 1".into()));
        }
        if let DataSpec::Synthetic { train, test, .. } = &self.data {
            if *train == 0 || *test == 0 {
                return Err(Error::Config("synthetic data needs train >= 1 and test >= 1".into()));
            }
        }
        match self.kind {
            ExperimentKind::SemiSupervised if self.train.supervision.is_none() => {
                Err(Error::Config("semi_supervised needs train.supervision".into()))
            }
            ExperimentKind::BiasVariance => {
                let bv = self
                    .bias_variance
                    .as_ref()
                    .ok_or_else(|| Error::Config("bias_variance needs a bias_variance section".into()))?;
                if bv.trials < 2 || bv.images == 0 || bv.sweeps.is_empty() {
                    return Err(Error::Config("bias_variance needs trials >= 2, images >= 1 and a sweep".into()));
                }
                if self.model.latent.is_structured() {
                    return Err(Error::Config("bias_variance profiles categorical latents".into()));
                }
                Ok(())
            }
            ExperimentKind::StructuredCompare if !self.model.latent.is_structured() => {
                Err(Error::Config("structured_compare needs a structured latent".into()))
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the spec's canonical JSON.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("specs serialize");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Set `path.to.key = value` inside a JSON object tree, creating objects
/// along the way.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path {path:?} has an empty segment")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Process exit status for a failed run: 2 spec, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 4,
        Error::Parse { .. } | Error::Checksum { .. } | Error::Download { .. } | Error::Io(_) | Error::Domain(_) => 3,
        _ => 2,
    }
}

/// Machine-readable error document.
pub fn error_json(err: &Error) -> String {
    let kind = match err {
        Error::Dimension { .. } => "dimension",
        Error::Contract(_) => "contract",
        Error::Domain(_) => "domain",
        Error::Capacity { .. } => "capacity",
        Error::Precondition(_) => "precondition",
        Error::Config(_) => "config",
        Error::Parse { .. } => "parse",
        Error::Checksum { .. } => "checksum",
        Error::Numeric(_) => "numeric",
        Error::Download { .. } => "download",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    serde_json::json!({ "error": kind, "message": err.to_string(), "exit_code": exit_code(err) }).to_string()
}
