//! Gumbel noise, the Gumbel-Max sampler, the loss-perturbed argmax and the
//! Gumbel-Softmax relaxation.
//!
//! Noise comes from [`NoiseStream`], a ChaCha8 counter-mode generator. A
//! stream is addressed by `(seed, stream)` and every draw by its word
//! position, so any [`GumbelDraw`] can be regenerated exactly; the direct
//! estimator relies on this to evaluate both argmaxes under one draw.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::log_sum_exp;

/// Euler-Mascheroni constant; the offset that centres the Gumbel law.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Uniform draws are clamped to at least this value before `-log(-log(u))`.
pub const UNIFORM_FLOOR: f64 = 1e-300;

/// Seeded, replayable random stream.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// A stream positioned at `word_pos`, for replaying earlier draws.
    pub fn at(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut s = Self::new(seed, stream);
        s.rng.set_word_pos(word_pos);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One zero-mean Gumbel variate.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().max(UNIFORM_FLOOR);
        -(-u.ln()).ln() - EULER_GAMMA
    }
}

impl RngCore for NoiseStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Where a draw came from: enough to regenerate it with [`NoiseStream::at`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawOrigin {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// A block of i.i.d. zero-mean Gumbel values laid out as `rows x states`.
///
/// For a categorical latent a row holds one value per configuration; for the
/// structured binary latent a row holds `2n` values, one per coordinate-state
/// pair, ordered `[z_0=0, z_0=1, z_1=0, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraw {
    values: Vec<f64>,
    rows: usize,
    states: usize,
    origin: Option<DrawOrigin>,
}

impl GumbelDraw {
    /// Wrap explicit values (for fixtures and replay tests).
    pub fn from_values(values: Vec<f64>, rows: usize, states: usize) -> Result<Self> {
        if values.len() != rows * states {
            return Err(dim_err("GumbelDraw", rows * states, values.len()));
        }
        Ok(Self {
            values,
            rows,
            states,
            origin: None,
        })
    }

    pub fn zeros(rows: usize, states: usize) -> Self {
        Self {
            values: vec![0.0; rows * states],
            rows,
            states,
            origin: None,
        }
    }

    pub fn sample(rows: usize, states: usize, rng: &mut NoiseStream) -> Self {
        let origin = DrawOrigin {
            seed: rng.seed(),
            stream: rng.stream(),
            word_pos: rng.word_pos(),
        };
        let values = (0..rows * states).map(|_| rng.gumbel()).collect();
        Self {
            values,
            rows,
            states,
            origin: Some(origin),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.states..(i + 1) * self.states]
    }

    pub fn origin(&self) -> Option<DrawOrigin> {
        self.origin
    }

    /// Regenerate this draw from its recorded origin.
    pub fn replay(&self) -> Option<Self> {
        let o = self.origin?;
        let mut rng = NoiseStream::at(o.seed, o.stream, o.word_pos);
        Some(Self::sample(self.rows, self.states, &mut rng))
    }
}

/// `count` zero-mean Gumbel values `-log(-log U) - c`, `U ~ Uniform(0,1)`.
pub fn sample_gumbel(count: usize, rng: &mut NoiseStream) -> GumbelDraw {
    GumbelDraw::sample(1, count, rng)
}

/// `argmax_i (logits_i + gamma_i)`, lowest index on ties.
pub fn gumbel_max_sample(logits: &[f64], gamma: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Contract("gumbel_max_sample needs at least one logit".into()));
    }
    if logits.len() != gamma.len() {
        return Err(dim_err("gumbel_max_sample noise length", logits.len(), gamma.len()));
    }
    Ok(argmax_by(logits.len(), |i| logits[i] + gamma[i]))
}

/// `argmax_i (eps * f_i + logits_i + gamma_i)`, lowest index on ties.
pub fn perturbed_argmax(logits: &[f64], f_values: &[f64], eps: f64, gamma: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Contract("perturbed_argmax needs at least one logit".into()));
    }
    if f_values.len() != logits.len() || gamma.len() != logits.len() {
        return Err(dim_err(
            "perturbed_argmax vector lengths",
            logits.len(),
            format!("f={}, gamma={}", f_values.len(), gamma.len()),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::Domain(format!("perturbed_argmax epsilon must be >= 0, got {eps}")));
    }
    Ok(argmax_by(logits.len(), |i| eps * f_values[i] + logits[i] + gamma[i]))
}

/// `softmax((logits + gamma) / tau)`.
pub fn gumbel_softmax_relax(logits: &[f64], gamma: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    if logits.len() != gamma.len() {
        return Err(dim_err("gumbel_softmax_relax noise length", logits.len(), gamma.len()));
    }
    let scaled: Vec<f64> = logits.iter().zip(gamma).map(|(l, g)| (l + g) / tau).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|s| (s - lse).exp()).collect())
}

fn argmax_by(n: usize, score: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = score(0);
    for i in 1..n {
        let v = score(i);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
