use super::{potentials_from_head, LatentSpec, PairwiseKind};
use crate::error::{Error, Result};
use crate::structured::{enumeration_features, Assignment, PairwisePotentials};
use crate::tensor::{forward_mlp, MlpNodes, MlpParams, NodeId, Tape, Tensor};

/// `(1/B) sum_b sum_z q log q`; adding `log(states)` gives the batch-mean KL
/// to the uniform prior.
pub(crate) fn neg_entropy(tape: &mut Tape, log_q: NodeId) -> Result<NodeId> {
    let batch = tape.value(log_q).rows() as f64;
    let q = tape.exp(log_q);
    let qh = tape.mul(q, log_q)?;
    let s = tape.sum(qh);
    Ok(tape.scale(s, 1.0 / batch))
}

/// Transposed enumeration features, split into the unary block (which is
/// also the two-hot decoder input of every state, read column-wise) and the
/// pairwise block.
#[derive(Clone, Debug)]
pub(crate) struct Features {
    /// `2^n x 2n`: two-hot code of every state, lexicographic.
    pub two_hot: Tensor,
    /// `2n x 2^n`.
    pub unary_t: Tensor,
    /// `m x 2^n`, absent without pairwise terms.
    pub pair_t: Option<Tensor>,
}

impl Features {
    pub fn new(latent: LatentSpec) -> Result<Self> {
        let LatentSpec::Structured { n, .. } = latent else {
            return Err(Error::Contract("features requested for a categorical latent".into()));
        };
        let pairs = latent.pairs();
        let phi = enumeration_features(n, &pairs)?;
        let states = phi.rows();
        let cols = phi.cols();
        let take = |lo: usize, hi: usize| -> Tensor {
            let mut data = Vec::with_capacity(states * (hi - lo));
            for r in 0..states {
                data.extend_from_slice(&phi.row(r)[lo..hi]);
            }
            Tensor::matrix(states, hi - lo, data).expect("sized")
        };
        let two_hot = take(0, 2 * n);
        let unary_t = two_hot.transpose();
        let pair_t = (!pairs.is_empty()).then(|| take(2 * n, cols).transpose());
        Ok(Self {
            two_hot,
            unary_t,
            pair_t,
        })
    }
}

/// Encoder pass for a structured latent with the exact log-posterior over
/// all `2^n` states.
pub(crate) struct StructuredGraph {
    pub tape: Tape,
    pub enc: MlpNodes,
    pub x: NodeId,
    /// `B x 2n` unary potentials.
    pub unary: NodeId,
    /// `B x m` edge weights after the supermodular transform.
    pub alpha: Option<NodeId>,
    /// `B x 2^n`.
    pub log_q: NodeId,
    pub latent: LatentSpec,
    pub batch: usize,
}

impl StructuredGraph {
    pub fn new(latent: LatentSpec, encoder: &MlpParams, x: &Tensor, features: &Features) -> Result<Self> {
        let LatentSpec::Structured { n, pairwise } = latent else {
            return Err(Error::Contract("structured graph for a categorical latent".into()));
        };
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let enc = forward_mlp(encoder, xi, &mut tape)?;
        let width = latent.encoder_width();
        let unary = tape.slice_cols(enc.output, 0, 2 * n)?;
        let ut = tape.constant(features.unary_t.clone());
        let mut scores = tape.matmul(unary, ut)?;
        let mut alpha = None;
        if let Some(pt) = &features.pair_t {
            let raw = tape.slice_cols(enc.output, 2 * n, width)?;
            let a = if pairwise == PairwiseKind::Supermodular { tape.softplus(raw) } else { raw };
            let pt = tape.constant(pt.clone());
            let pair_scores = tape.matmul(a, pt)?;
            scores = tape.add(scores, pair_scores)?;
            alpha = Some(a);
        }
        let log_q = tape.log_softmax(scores)?;
        Ok(Self {
            tape,
            enc,
            x: xi,
            unary,
            alpha,
            log_q,
            latent,
            batch: x.rows(),
        })
    }

    pub fn n(&self) -> usize {
        match self.latent {
            LatentSpec::Structured { n, .. } => n,
            LatentSpec::Categorical { .. } => unreachable!("constructed for structured latents only"),
        }
    }

    /// Potentials of row `b`, read back from the encoder head.
    pub fn potentials(&self, b: usize) -> Result<PairwisePotentials> {
        potentials_from_head(self.latent, self.tape.value(self.enc.output).row(b))
    }

    /// Record `F[b, s] = f(x_b, state s)` for all states with one decoder
    /// pass over the two-hot table.
    pub fn all_states_f(&mut self, decoder: &MlpParams, features: &Features) -> Result<(MlpNodes, NodeId)> {
        let inputs = self.tape.constant(features.two_hot.clone());
        let dec = forward_mlp(decoder, inputs, &mut self.tape)?;
        let bce = self.tape.bce_cross(dec.output, self.x)?;
        Ok((dec, self.tape.scale(bce, -1.0)))
    }

    /// Weights on `unary` and `alpha` whose weighted sum is
    /// `c * sum_b (score(plus_b) - score(minus_b))` up to potentials'
    /// constants.
    pub fn score_difference_weights(
        &self,
        plus: &[Assignment],
        minus: &[Assignment],
        c: f64,
    ) -> (Tensor, Option<Tensor>) {
        let n = self.n();
        let pairs = self.latent.pairs();
        let mut wu = Tensor::zeros(&[self.batch, 2 * n]);
        let mut wa = self.alpha.map(|_| Tensor::zeros(&[self.batch, pairs.len()]));
        for b in 0..self.batch {
            let (p, m) = (plus[b].bits(), minus[b].bits());
            if p == m {
                continue;
            }
            let row = wu.row_mut(b);
            for i in 0..n {
                row[2 * i + p[i] as usize] += c;
                row[2 * i + m[i] as usize] -= c;
            }
            if let Some(wa) = wa.as_mut() {
                let row = wa.row_mut(b);
                for (e, &(i, j)) in pairs.iter().enumerate() {
                    row[e] = c * ((p[i] * p[j]) as f64 - (m[i] * m[j]) as f64);
                }
            }
        }
        (wu, wa)
    }
}

/// Lexicographic index of an assignment (bit 0 is most significant).
pub(crate) fn state_index(z: &Assignment) -> usize {
    z.bits().iter().fold(0, |acc, &b| (acc << 1) | b as usize)
}
