//! Discrete variational autoencoders with categorical or structured binary
//! latents, trained by any estimator from [`crate::estimators`].
//!
//! The encoder emits `h(x, z) = log q(z|x)`: log-softmax logits for a
//! categorical latent, or pairwise potentials (normalized by enumeration)
//! for a structured one. The decoder maps a one-hot (categorical) or
//! two-hot (structured) latent to Bernoulli pixel logits. The prior is
//! uniform, and the loss is `-f(x, z*) + KL(q || uniform)`.

mod checkpoint;
mod eval;
mod graph;
mod train;

pub use checkpoint::{CheckpointManifest, CHECKPOINT_BIN, CHECKPOINT_JSON, CHECKPOINT_VERSION};
pub use eval::{evaluate, EvalReport};
pub(crate) use train::mix;
pub use train::{supervised_direct_gradient, EpochStats, StepMetrics, Trainer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind};
use crate::structured::{Assignment, Edge, PairwisePotentials};
use crate::tensor::{softplus, Activation, LayerSpec, MlpParams, OptimizerKind, Tensor};

/// Largest structured latent trained by enumeration of `2^n` states.
pub const MAX_TRAIN_BITS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairwiseKind {
    /// Independent coordinates.
    None,
    /// Edge weights pass through softplus, so MAP is a min-cut.
    Supermodular,
    /// Unconstrained edge weights; MAP by enumeration.
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatentSpec {
    Categorical { k: usize },
    Structured { n: usize, pairwise: PairwiseKind },
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Categorical { k } if k < 2 => Err(Error::Config(format!("categorical latent needs k >= 2, got {k}"))),
            Self::Structured { n, .. } if n == 0 || n > MAX_TRAIN_BITS => Err(Error::Config(format!(
                "structured latent needs 1 <= n <= {MAX_TRAIN_BITS}, got {n}"
            ))),
            _ => Ok(()),
        }
    }

    /// Edges `(i, j)`, `i < j`, in lexicographic order (empty without
    /// pairwise terms).
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        match *self {
            Self::Structured { n, pairwise } if pairwise != PairwiseKind::None => {
                (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn encoder_width(&self) -> usize {
        match *self {
            Self::Categorical { k } => k,
            Self::Structured { n, .. } => 2 * n + self.pairs().len(),
        }
    }

    pub fn decoder_width(&self) -> usize {
        match *self {
            Self::Categorical { k } => k,
            Self::Structured { n, .. } => 2 * n,
        }
    }

    /// Number of latent configurations.
    pub fn states(&self) -> usize {
        match *self {
            Self::Categorical { k } => k,
            Self::Structured { n, .. } => 1 << n,
        }
    }

    /// Width of one Gumbel row: one value per state (categorical) or per
    /// coordinate-state pair (structured).
    pub fn noise_width(&self) -> usize {
        self.decoder_width()
    }

    pub fn is_structured(&self) -> bool {
        matches!(self, Self::Structured { .. })
    }
}

fn default_input() -> usize {
    784
}

fn default_hidden() -> usize {
    300
}

/// Architecture: `x -> FC(hidden) -> ReLU -> FC(head)` and
/// `latent -> FC(hidden) -> ReLU -> FC(input)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent: LatentSpec,
    #[serde(default = "default_input")]
    pub input: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl ModelSpec {
    pub fn new(latent: LatentSpec, input: usize, hidden: usize) -> Self {
        Self { latent, input, hidden }
    }

    pub fn mnist(latent: LatentSpec) -> Self {
        Self::new(latent, default_input(), default_hidden())
    }
}

/// A concrete latent value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LatentValue {
    Categorical(usize),
    Structured(Assignment),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DvaeModel {
    latent: LatentSpec,
    encoder: MlpParams,
    decoder: MlpParams,
}

impl DvaeModel {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.latent.validate()?;
        let encoder = MlpParams::init(
            &[
                LayerSpec::new(spec.input, spec.hidden, Activation::Relu),
                LayerSpec::new(spec.hidden, spec.latent.encoder_width(), Activation::Identity),
            ],
            rng,
        )?;
        let decoder = MlpParams::init(
            &[
                LayerSpec::new(spec.latent.decoder_width(), spec.hidden, Activation::Relu),
                LayerSpec::new(spec.hidden, spec.input, Activation::Identity),
            ],
            rng,
        )?;
        Self::from_parts(spec.latent, encoder, decoder)
    }

    pub fn from_parts(latent: LatentSpec, encoder: MlpParams, decoder: MlpParams) -> Result<Self> {
        latent.validate()?;
        if encoder.output_width() != latent.encoder_width() {
            return Err(dim_err("encoder output width", latent.encoder_width(), encoder.output_width()));
        }
        if decoder.input_width() != latent.decoder_width() {
            return Err(dim_err("decoder input width", latent.decoder_width(), decoder.input_width()));
        }
        if decoder.output_width() != encoder.input_width() {
            return Err(dim_err("decoder output width", encoder.input_width(), decoder.output_width()));
        }
        Ok(Self {
            latent,
            encoder,
            decoder,
        })
    }

    pub fn latent(&self) -> LatentSpec {
        self.latent
    }

    pub fn encoder(&self) -> &MlpParams {
        &self.encoder
    }

    pub fn decoder(&self) -> &MlpParams {
        &self.decoder
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut MlpParams, &mut MlpParams) {
        (&mut self.encoder, &mut self.decoder)
    }

    /// Decoder input vector for `z`.
    pub fn decoder_input(&self, z: &LatentValue) -> Result<Vec<f64>> {
        match (self.latent, z) {
            (LatentSpec::Categorical { k }, LatentValue::Categorical(i)) => {
                if *i >= k {
                    return Err(Error::Domain(format!("latent state {i} outside 0..{k}")));
                }
                let mut v = vec![0.0; k];
                v[*i] = 1.0;
                Ok(v)
            }
            (LatentSpec::Structured { n, .. }, LatentValue::Structured(a)) => {
                if a.len() != n {
                    return Err(dim_err("structured latent length", n, a.len()));
                }
                Ok(a.two_hot())
            }
            _ => Err(Error::Contract("latent value does not match the model's latent spec".into())),
        }
    }

    /// Structured potentials encoded by one encoder output row.
    pub fn potentials_from_head(&self, head: &[f64]) -> Result<PairwisePotentials> {
        potentials_from_head(self.latent, head)
    }
}

pub(crate) fn potentials_from_head(latent: LatentSpec, head: &[f64]) -> Result<PairwisePotentials> {
    let LatentSpec::Structured { n, pairwise } = latent else {
        return Err(Error::Contract("potentials requested for a categorical latent".into()));
    };
    if head.len() != latent.encoder_width() {
        return Err(dim_err("encoder head width", latent.encoder_width(), head.len()));
    }
    let unary = (0..n).map(|i| [head[2 * i], head[2 * i + 1]]).collect();
    let edges = latent
        .pairs()
        .into_iter()
        .enumerate()
        .map(|(e, (i, j))| {
            let raw = head[2 * n + e];
            let alpha = if pairwise == PairwiseKind::Supermodular { softplus(raw) } else { raw };
            Edge { i, j, alpha }
        })
        .collect();
    PairwisePotentials::new(n, unary, edges)
}

/// `KL(q || uniform) = sum_z q(z) log q(z) + log k` for normalized
/// log-probabilities.
pub fn kl_categorical_uniform(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Contract("empty distribution".into()));
    }
    let mass: f64 = log_probs.iter().map(|l| l.exp()).sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("log-probabilities sum to {mass} in probability space, not 1")));
    }
    let neg_entropy: f64 = log_probs
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l })
        .sum();
    Ok((neg_entropy + (log_probs.len() as f64).ln()).max(0.0))
}

/// Single-sample negative bound `-f(x, z) + kl_value` for one image.
pub fn elbo(model: &DvaeModel, x: &[f64], z: &LatentValue, kl_value: f64) -> Result<f64> {
    if x.len() != model.input_width() {
        return Err(dim_err("observation width", model.input_width(), x.len()));
    }
    let input = Tensor::matrix(1, model.latent.decoder_width(), model.decoder_input(z)?)?;
    let logits = model.decoder.forward(&input)?;
    let bce: f64 = logits
        .row(0)
        .iter()
        .zip(x)
        .map(|(&l, &t)| crate::tensor::bce_with_logits(l, t))
        .sum();
    Ok(bce + kl_value)
}

/// `max(min, initial * exp(-rate * floor(step / period) * period))`.
pub fn anneal(initial: f64, min: f64, rate: f64, period: u64, step: u64) -> f64 {
    let t = (step / period.max(1)) * period.max(1);
    (initial * (-rate * t as f64).exp()).max(min)
}

/// Labeled-batch mixing for the semi-supervised objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Supervision {
    /// Number of labeled training images.
    pub labels: usize,
    /// Multiplier on the supervised encoder term.
    #[serde(default = "one")]
    pub weight: f64,
    /// Unlabeled batches between labeled ones. Spacing them by the
    /// unlabeled/labeled size ratio starves a 100-label run of supervised
    /// steps, hence the default of 1.
    #[serde(default = "one_batch")]
    pub interval: usize,
}

fn one_batch() -> usize {
    1
}

fn one() -> f64 {
    1.0
}

fn default_lr() -> f64 {
    1e-3
}

fn default_anneal_rate() -> f64 {
    1e-5
}

fn default_anneal_period() -> u64 {
    1000
}

fn default_epsilon_min() -> f64 {
    0.1
}

fn default_tau_min() -> f64 {
    0.5
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    100
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub estimator: EstimatorConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_anneal_rate")]
    pub anneal_rate: f64,
    #[serde(default = "default_anneal_period")]
    pub anneal_period: u64,
    #[serde(default = "default_epsilon_min")]
    pub epsilon_min: f64,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub supervision: Option<Supervision>,
}

impl TrainConfig {
    pub fn new(estimator: EstimatorConfig) -> Self {
        Self {
            estimator,
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            anneal_rate: default_anneal_rate(),
            anneal_period: default_anneal_period(),
            epsilon_min: default_epsilon_min(),
            tau_min: default_tau_min(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            supervision: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate().map_err(|e| Error::Config(e.to_string()))?;
        let checks = [
            (self.learning_rate.is_finite() && self.learning_rate >= 0.0, "learning_rate must be finite and >= 0"),
            (self.anneal_rate.is_finite() && self.anneal_rate >= 0.0, "anneal_rate must be finite and >= 0"),
            (self.anneal_period >= 1, "anneal_period must be >= 1"),
            (self.epsilon_min > 0.0, "epsilon_min must be > 0"),
            (self.tau_min > 0.0, "tau_min must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        if let Some(s) = &self.supervision {
            if s.labels == 0 || !(s.weight >= 0.0) || s.interval == 0 {
                return Err(Error::Config("supervision needs labels >= 1, weight >= 0, interval >= 1".into()));
            }
        }
        Ok(())
    }

    /// The annealed bias knob at `step` (0 for knob-free estimators).
    pub fn knob_at(&self, step: u64) -> f64 {
        let (init, min) = match self.estimator.variant {
            EstimatorKind::Direct => (self.estimator.epsilon, self.epsilon_min),
            EstimatorKind::Gsm => (self.estimator.tau, self.tau_min),
            _ => return 0.0,
        };
        anneal(init, min, self.anneal_rate, self.anneal_period, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kl_examples() {
        let uniform = vec![-(5f64).ln(); 5];
        assert!(kl_categorical_uniform(&uniform).unwrap().abs() < 1e-15);
        let mut logits = vec![0.0; 10];
        logits[3] = 30.0;
        let lp = crate::tensor::log_softmax_rows(&Tensor::matrix(1, 10, logits).unwrap());
        assert!((kl_categorical_uniform(lp.data()).unwrap() - 10f64.ln()).abs() < 1e-6);
        assert!(matches!(kl_categorical_uniform(&[0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(anneal(1.0, 0.1, 1e-5, 1000, 999), 1.0);
        assert!((anneal(1.0, 0.1, 1e-5, 1000, 1000) - (-0.01f64).exp()).abs() < 1e-15);
        assert_eq!(anneal(1.0, 0.1, 1e-5, 1000, 10_000_000), 0.1);
        let mut prev = f64::INFINITY;
        for t in (0..500_000).step_by(997) {
            let e = anneal(1.0, 0.1, 1e-5, 1000, t);
            assert!(e <= prev && e >= 0.1);
            prev = e;
        }
    }

    #[test]
    fn structured_widths() {
        let l = LatentSpec::Structured { n: 4, pairwise: PairwiseKind::Supermodular };
        assert_eq!(l.encoder_width(), 8 + 6);
        assert_eq!(l.decoder_width(), 8);
        assert_eq!(l.pairs()[..3], [(0, 1), (0, 2), (0, 3)]);
        let head: Vec<f64> = (0..14).map(|i| i as f64 - 10.0).collect();
        let p = potentials_from_head(l, &head).unwrap();
        assert!(p.is_supermodular());
        assert_eq!(p.unary()[1], [-8.0, -7.0]);
    }

    #[test]
    fn elbo_uninformative_model() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let spec = ModelSpec::new(LatentSpec::Categorical { k: 3 }, 5, 4);
        let mut m = DvaeModel::new(&spec, &mut rng).unwrap();
        for t in m.decoder.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let x = [1.0, 0.0, 1.0, 1.0, 0.0];
        let v = elbo(&m, &x, &LatentValue::Categorical(2), 0.0).unwrap();
        assert!((v - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!(m.decoder_input(&LatentValue::Categorical(3)).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"estimator":{"variant":"direct"}}"#).unwrap();
        assert_eq!(c, TrainConfig::new(EstimatorConfig::direct(1.0)));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"estimator":{"variant":"direct"},"bogus":1}"#).is_err());
    }
}
