//! Gradient estimators for `E_{z ~ q(z|x)}[f(x, z)]` under a categorical
//! encoder `q = softmax(encoder(x))` and a Bernoulli decoder with
//! `f(x, z) = -BCE(decoder(onehot(z)), x)`.
//!
//! Every estimator returns the gradient of the batch-mean objective
//! `(1/B) sum_b E[f(x_b, z)]` (an ascent direction) for both networks:
//!
//! * [`unbiased_gradient`]: exact enumeration over all `k` states.
//! * [`direct_gradient`]: `(grad h(z*(eps)) - grad h(z*)) / eps` with one
//!   shared Gumbel draw for both argmaxes.
//! * [`gsm_gradient`]: backpropagation through the Gumbel-Softmax relaxation.
//! * [`score_function_gradient`]: `f(x, z) grad log q(z|x)` without baseline.
//!
//! Decoder scores for all `k` states come from one decoder pass over the
//! `k x k` identity, since a one-hot decoder input does not depend on `x`.

mod profile;

pub use profile::{bias_variance_profile, write_stats_csv, GradientStats, ProfileProblem};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::gumbel::{GumbelDraw, NoiseStream};
use crate::tensor::{argmax, forward_mlp, MlpGrads, MlpNodes, MlpParams, NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    UnbiasedEnum,
    Direct,
    Gsm,
    ScoreFunction,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::UnbiasedEnum => "unbiased_enum",
            Self::Direct => "direct",
            Self::Gsm => "gsm",
            Self::ScoreFunction => "score_function",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_epsilon() -> f64 {
    1.0
}

fn default_tau() -> f64 {
    1.0
}

fn default_samples() -> usize {
    1
}

/// Estimator variant plus its bias knob. Only `epsilon` is read by
/// [`EstimatorKind::Direct`] and only `tau` by [`EstimatorKind::Gsm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub variant: EstimatorKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_samples")]
    pub samples_per_step: usize,
}

impl EstimatorConfig {
    pub fn new(variant: EstimatorKind) -> Self {
        Self {
            variant,
            epsilon: default_epsilon(),
            tau: default_tau(),
            samples_per_step: 1,
        }
    }

    pub fn direct(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::new(EstimatorKind::Direct)
        }
    }

    pub fn gsm(tau: f64) -> Self {
        Self {
            tau,
            ..Self::new(EstimatorKind::Gsm)
        }
    }

    /// The bias knob this variant consults (0 for knob-free variants).
    pub fn knob(&self) -> f64 {
        match self.variant {
            EstimatorKind::Direct => self.epsilon,
            EstimatorKind::Gsm => self.tau,
            EstimatorKind::UnbiasedEnum | EstimatorKind::ScoreFunction => 0.0,
        }
    }

    pub fn with_knob(mut self, knob: f64) -> Self {
        match self.variant {
            EstimatorKind::Direct => self.epsilon = knob,
            EstimatorKind::Gsm => self.tau = knob,
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_step == 0 {
            return Err(Error::Config("samples_per_step must be positive".into()));
        }
        match self.variant {
            EstimatorKind::Direct if !(self.epsilon > 0.0) => Err(Error::Domain(format!(
                "direct estimator needs epsilon > 0, got {}",
                self.epsilon
            ))),
            EstimatorKind::Gsm if !(self.tau > 0.0) => {
                Err(Error::Domain(format!("gsm needs tau > 0, got {}", self.tau)))
            }
            _ => Ok(()),
        }
    }
}

/// Gradients for both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

impl GradientMap {
    pub fn zeros_like(encoder: &MlpParams, decoder: &MlpParams) -> Self {
        Self {
            encoder: MlpGrads::zeros_like(encoder),
            decoder: MlpGrads::zeros_like(decoder),
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &GradientMap) {
        self.encoder.add_scaled(alpha, &other.encoder);
        self.decoder.add_scaled(alpha, &other.decoder);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.encoder.scale(alpha);
        self.decoder.scale(alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }
}

pub(crate) fn check_categorical(encoder: &MlpParams, decoder: &MlpParams, x: &Tensor) -> Result<usize> {
    let k = encoder.output_width();
    if decoder.input_width() != k {
        return Err(dim_err("decoder input width (one-hot of k)", k, decoder.input_width()));
    }
    if x.cols() != encoder.input_width() {
        return Err(dim_err("observation width", encoder.input_width(), x.cols()));
    }
    if decoder.output_width() != x.cols() {
        return Err(dim_err("decoder output width", x.cols(), decoder.output_width()));
    }
    if x.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(k)
}

/// Encoder log-probabilities and all-states decoder scores recorded on one
/// tape.
pub(crate) struct CategoricalGraph {
    pub tape: Tape,
    pub enc: MlpNodes,
    pub dec: MlpNodes,
    /// `B x k` log-probabilities `h(x, z)`.
    pub log_q: NodeId,
    /// `B x k` decoder log-likelihoods `f(x, z)`.
    pub f: NodeId,
    pub batch: usize,
    pub k: usize,
}

impl CategoricalGraph {
    pub fn new(encoder: &MlpParams, decoder: &MlpParams, x: &Tensor) -> Result<Self> {
        let k = check_categorical(encoder, decoder, x)?;
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let enc = forward_mlp(encoder, xi, &mut tape)?;
        let log_q = tape.log_softmax(enc.output)?;
        let eye = tape.constant(Tensor::eye(k));
        let dec = forward_mlp(decoder, eye, &mut tape)?;
        let bce = tape.bce_cross(dec.output, xi)?;
        let f = tape.scale(bce, -1.0);
        Ok(Self {
            tape,
            enc,
            dec,
            log_q,
            f,
            batch: x.rows(),
            k,
        })
    }

    pub fn log_q_row(&self, b: usize) -> &[f64] {
        self.tape.value(self.log_q).row(b)
    }

    pub fn f_row(&self, b: usize) -> &[f64] {
        self.tape.value(self.f).row(b)
    }

    /// Plain Gumbel-max states `z*_b`.
    pub fn argmax_states(&self, gamma: &GumbelDraw) -> Result<Vec<usize>> {
        self.check_noise(gamma)?;
        (0..self.batch)
            .map(|b| crate::gumbel::gumbel_max_sample(self.log_q_row(b), gamma.row(b)))
            .collect()
    }

    /// `(z*_b, z*_b(eps))` pairs under one draw.
    pub fn paired_argmax(&self, gamma: &GumbelDraw, eps: f64) -> Result<Vec<(usize, usize)>> {
        self.check_noise(gamma)?;
        (0..self.batch)
            .map(|b| {
                let (h, g) = (self.log_q_row(b), gamma.row(b));
                let z = crate::gumbel::gumbel_max_sample(h, g)?;
                let ze = crate::gumbel::perturbed_argmax(h, self.f_row(b), eps, g)?;
                Ok((z, ze))
            })
            .collect()
    }

    fn check_noise(&self, gamma: &GumbelDraw) -> Result<()> {
        if gamma.rows() != self.batch || gamma.states() != self.k {
            return Err(dim_err(
                "Gumbel draw shape",
                format!("{} x {}", self.batch, self.k),
                format!("{} x {}", gamma.rows(), gamma.states()),
            ));
        }
        Ok(())
    }

    /// Weights on `log_q` realizing the direct estimator, batch-averaged.
    pub fn direct_weights(&self, pairs: &[(usize, usize)], eps: f64) -> Tensor {
        let mut w = Tensor::zeros(&[self.batch, self.k]);
        let c = 1.0 / (eps * self.batch as f64);
        for (b, &(z, ze)) in pairs.iter().enumerate() {
            if z != ze {
                w.row_mut(b)[ze] += c;
                w.row_mut(b)[z] -= c;
            }
        }
        w
    }

    /// Weights selecting `f(x_b, z_b)`, batch-averaged.
    pub fn selection_weights(&self, states: &[usize]) -> Tensor {
        let mut w = Tensor::zeros(&[self.batch, self.k]);
        let c = 1.0 / self.batch as f64;
        for (b, &z) in states.iter().enumerate() {
            w.row_mut(b)[z] = c;
        }
        w
    }

    /// Weights on `log_q` realizing the score-function estimator.
    pub fn score_weights(&self, states: &[usize]) -> Tensor {
        let mut w = Tensor::zeros(&[self.batch, self.k]);
        let c = 1.0 / self.batch as f64;
        for (b, &z) in states.iter().enumerate() {
            w.row_mut(b)[z] = c * self.f_row(b)[z];
        }
        w
    }

    /// Scalar whose gradient is the exact enumeration gradient.
    pub fn unbiased_objective(&mut self) -> Result<NodeId> {
        let q = self.tape.exp(self.log_q);
        let qf = self.tape.mul(q, self.f)?;
        let s = self.tape.sum(qf);
        Ok(self.tape.scale(s, 1.0 / self.batch as f64))
    }

    /// Scalar whose gradient is the direct estimator (encoder) plus
    /// `grad_theta f(x, z*)` (decoder).
    pub fn direct_objective(&mut self, gamma: &GumbelDraw, eps: f64) -> Result<NodeId> {
        let pairs = self.paired_argmax(gamma, eps)?;
        let wh = self.direct_weights(&pairs, eps);
        let states: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let wf = self.selection_weights(&states);
        let a = self.tape.weighted_sum(self.log_q, wh)?;
        let b = self.tape.weighted_sum(self.f, wf)?;
        self.tape.add(a, b)
    }

    pub fn score_objective(&mut self, states: &[usize]) -> Result<NodeId> {
        for &z in states {
            if z >= self.k {
                return Err(Error::Domain(format!("latent state {z} outside 0..{}", self.k)));
            }
        }
        if states.len() != self.batch {
            return Err(dim_err("sampled states", self.batch, states.len()));
        }
        let wh = self.score_weights(states);
        let wf = self.selection_weights(states);
        let a = self.tape.weighted_sum(self.log_q, wh)?;
        let b = self.tape.weighted_sum(self.f, wf)?;
        self.tape.add(a, b)
    }

    pub fn gradients(&self, objective: NodeId) -> Result<GradientMap> {
        let g = self.tape.backward(objective)?;
        Ok(GradientMap {
            encoder: self.enc.grads(&g),
            decoder: self.dec.grads(&g),
        })
    }
}

/// Exact gradient by enumeration over the `k` latent states.
pub fn unbiased_gradient(encoder: &MlpParams, decoder: &MlpParams, x: &Tensor) -> Result<GradientMap> {
    let mut g = CategoricalGraph::new(encoder, decoder, x)?;
    let obj = g.unbiased_objective()?;
    g.gradients(obj)
}

/// Single-draw direct estimator (one Gumbel row per observation).
pub fn direct_gradient(
    encoder: &MlpParams,
    decoder: &MlpParams,
    x: &Tensor,
    gamma: &GumbelDraw,
    eps: f64,
) -> Result<GradientMap> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("direct estimator needs epsilon > 0, got {eps}")));
    }
    let mut g = CategoricalGraph::new(encoder, decoder, x)?;
    let obj = g.direct_objective(gamma, eps)?;
    g.gradients(obj)
}

/// Score-function (REINFORCE) estimator for states sampled from `q`.
pub fn score_function_gradient(
    encoder: &MlpParams,
    decoder: &MlpParams,
    x: &Tensor,
    states: &[usize],
) -> Result<GradientMap> {
    let mut g = CategoricalGraph::new(encoder, decoder, x)?;
    let obj = g.score_objective(states)?;
    g.gradients(obj)
}

/// Gradient of the relaxed objective `-BCE(decoder(softmax((h + g)/tau)), x)`.
pub fn gsm_gradient(
    encoder: &MlpParams,
    decoder: &MlpParams,
    x: &Tensor,
    gamma: &GumbelDraw,
    tau: f64,
) -> Result<GradientMap> {
    let mut tape = Tape::new();
    let g = GsmGraph::record(&mut tape, encoder, decoder, x, gamma, tau)?;
    let grads = tape.backward(g.objective)?;
    Ok(GradientMap {
        encoder: g.enc.grads(&grads),
        decoder: g.dec.grads(&grads),
    })
}

/// Handles into a recorded relaxed objective.
pub(crate) struct GsmGraph {
    pub enc: MlpNodes,
    pub dec: MlpNodes,
    pub log_q: NodeId,
    /// Batch-mean relaxed log-likelihood.
    pub objective: NodeId,
}

impl GsmGraph {
    pub fn record(
        tape: &mut Tape,
        encoder: &MlpParams,
        decoder: &MlpParams,
        x: &Tensor,
        gamma: &GumbelDraw,
        tau: f64,
    ) -> Result<Self> {
        gsm_record(tape, encoder, decoder, x, gamma, tau)
    }
}

fn gsm_record(
    tape: &mut Tape,
    encoder: &MlpParams,
    decoder: &MlpParams,
    x: &Tensor,
    gamma: &GumbelDraw,
    tau: f64,
) -> Result<GsmGraph> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    let k = check_categorical(encoder, decoder, x)?;
    if gamma.rows() != x.rows() || gamma.states() != k {
        return Err(dim_err(
            "Gumbel draw shape",
            format!("{} x {k}", x.rows()),
            format!("{} x {}", gamma.rows(), gamma.states()),
        ));
    }
    let xi = tape.constant(x.clone());
    let enc = forward_mlp(encoder, xi, tape)?;
    let log_q = tape.log_softmax(enc.output)?;
    let noise = tape.constant(Tensor::matrix(x.rows(), k, gamma.values().to_vec())?);
    let perturbed = tape.add(log_q, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let relaxed = tape.softmax(scaled)?;
    let dec = forward_mlp(decoder, relaxed, tape)?;
    let bce = tape.bce_loss(dec.output, xi)?;
    let objective = tape.scale(bce, -1.0 / x.rows() as f64);
    Ok(GsmGraph {
        enc,
        dec,
        log_q,
        objective,
    })
}

/// Draw one state per row from `q(.|x)` by the Gumbel-max trick.
pub fn sample_posterior(encoder: &MlpParams, x: &Tensor, rng: &mut NoiseStream) -> Result<Vec<usize>> {
    let logits = encoder.forward(x)?;
    let gamma = GumbelDraw::sample(x.rows(), logits.cols(), rng);
    (0..x.rows())
        .map(|b| crate::gumbel::gumbel_max_sample(logits.row(b), gamma.row(b)))
        .collect()
}

/// Rows of `x` repeated `times` times each (`[x0, x0, ..., x1, ...]`).
pub fn repeat_rows(x: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.len() * times);
    for r in 0..x.rows() {
        for _ in 0..times {
            data.extend_from_slice(x.row(r));
        }
    }
    Tensor::matrix(x.rows() * times, x.cols(), data).expect("sized")
}

/// Encoder argmax `argmax_z h(x, z)` per row.
pub fn encoder_argmax(encoder: &MlpParams, x: &Tensor) -> Result<Vec<usize>> {
    let logits = encoder.forward(x)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}
