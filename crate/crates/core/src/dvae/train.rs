use std::time::Instant;

use super::graph::{neg_entropy, state_index, Features, StructuredGraph};
use super::{DvaeModel, LatentSpec, TrainConfig};
use crate::data::{batch_iterator, Dataset};
use crate::error::{dim_err, Error, Result};
use crate::estimators::{repeat_rows, CategoricalGraph, EstimatorKind, GsmGraph};
use crate::gumbel::{gumbel_max_sample, GumbelDraw, NoiseStream};
use crate::structured::{
    assemble_lowdim, decoder_log_likelihood, lowdim_inputs, structured_map, structured_perturbed_argmax, Assignment,
};
use crate::tensor::{forward_mlp, MlpGrads, MlpNodes, MlpParams, NodeId, Optimizer, Tape, Tensor};

/// Per-step training summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Step index after the update.
    pub step: u64,
    /// Batch mean of `-f(x, z*) + KL`.
    pub loss: f64,
    /// Batch mean KL.
    pub kl: f64,
    /// Bias knob used for this step.
    pub knob: f64,
}

/// Summary of one pass over the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Image-weighted mean of unlabeled step losses.
    pub train_loss: f64,
    pub steps: usize,
    pub labeled_steps: usize,
    /// Wall time of each unlabeled step, in milliseconds.
    pub batch_ms: Vec<f64>,
}

/// Model, optimizer state and noise stream for a training run. Noise for
/// step draws comes from stream `(seed, 0)`.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub(crate) model: DvaeModel,
    pub(crate) config: TrainConfig,
    pub(crate) optimizer: Optimizer,
    pub(crate) noise: NoiseStream,
    pub(crate) step: u64,
    features: Option<Features>,
}

impl Trainer {
    pub fn new(model: DvaeModel, config: TrainConfig) -> Result<Self> {
        let noise = NoiseStream::new(config.seed, 0);
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        Self::from_state(model, config, optimizer, noise, 0)
    }

    pub(crate) fn from_state(
        model: DvaeModel,
        config: TrainConfig,
        optimizer: Optimizer,
        noise: NoiseStream,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        let latent = model.latent();
        if latent.is_structured() && config.estimator.variant == EstimatorKind::Gsm {
            return Err(Error::Config("the Gumbel-Softmax relaxation needs a categorical latent".into()));
        }
        if latent.is_structured() && config.supervision.is_some() {
            return Err(Error::Config("supervision needs a categorical latent".into()));
        }
        let features = latent.is_structured().then(|| Features::new(latent)).transpose()?;
        Ok(Self {
            model,
            config,
            optimizer,
            noise,
            step,
            features,
        })
    }

    pub fn model(&self) -> &DvaeModel {
        &self.model
    }

    pub fn into_model(self) -> DvaeModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Bias knob for the next step.
    pub fn knob(&self) -> f64 {
        self.config.knob_at(self.step)
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if x.cols() != self.model.input_width() {
            return Err(dim_err("batch width", self.model.input_width(), x.cols()));
        }
        Ok(())
    }

    /// One update on an unlabeled batch with the configured estimator.
    pub fn train_step(&mut self, x: &Tensor) -> Result<StepMetrics> {
        self.check_batch(x)?;
        let est = self.config.estimator;
        let x = if est.samples_per_step > 1 && est.variant != EstimatorKind::UnbiasedEnum {
            repeat_rows(x, est.samples_per_step)
        } else {
            x.clone()
        };
        let knob = self.knob();
        match self.model.latent() {
            LatentSpec::Categorical { .. } if est.variant == EstimatorKind::Gsm => self.gsm_step(&x, knob),
            LatentSpec::Categorical { .. } => self.categorical_step(&x, knob),
            LatentSpec::Structured { .. } => self.structured_step(&x, knob),
        }
    }

    fn categorical_step(&mut self, x: &Tensor, knob: f64) -> Result<StepMetrics> {
        let mut g = CategoricalGraph::new(&self.model.encoder, &self.model.decoder, x)?;
        let gamma = GumbelDraw::sample(g.batch, g.k, &mut self.noise);
        let states = g.argmax_states(&gamma)?;
        let recon = mean_selected_neg(&g, &states);
        let obj = match self.config.estimator.variant {
            EstimatorKind::UnbiasedEnum => g.unbiased_objective()?,
            EstimatorKind::Direct => g.direct_objective(&gamma, knob)?,
            EstimatorKind::ScoreFunction => g.score_objective(&states)?,
            EstimatorKind::Gsm => unreachable!("dispatched to gsm_step"),
        };
        let ne = neg_entropy(&mut g.tape, g.log_q)?;
        let loss = g.tape.sub(ne, obj)?;
        let kl = g.tape.value(ne).item() + (g.k as f64).ln();
        let (enc, dec) = (g.enc.clone(), g.dec.clone());
        self.apply(&g.tape, loss, &enc, &dec)?;
        Ok(self.metrics(recon + kl, kl, knob))
    }

    fn gsm_step(&mut self, x: &Tensor, tau: f64) -> Result<StepMetrics> {
        let k = self.model.latent().states();
        let gamma = GumbelDraw::sample(x.rows(), k, &mut self.noise);
        let mut tape = Tape::new();
        let g = GsmGraph::record(&mut tape, &self.model.encoder, &self.model.decoder, x, &gamma, tau)?;
        let ne = neg_entropy(&mut tape, g.log_q)?;
        let loss = tape.sub(ne, g.objective)?;
        let kl = tape.value(ne).item() + (k as f64).ln();
        // Report the discrete loss at the hard sample, not the relaxed one.
        let lq = tape.value(g.log_q);
        let mut onehot = Tensor::zeros(&[x.rows(), k]);
        for b in 0..x.rows() {
            let z = gumbel_max_sample(lq.row(b), gamma.row(b))?;
            onehot.row_mut(b)[z] = 1.0;
        }
        let f = decoder_log_likelihood(&self.model.decoder, &onehot, x)?;
        let recon = -f.iter().sum::<f64>() / x.rows() as f64;
        self.apply(&tape, loss, &g.enc, &g.dec)?;
        Ok(self.metrics(recon + kl, kl, tau))
    }

    fn structured_step(&mut self, x: &Tensor, eps: f64) -> Result<StepMetrics> {
        let latent = self.model.latent();
        let features = self.features.as_ref().expect("built for structured latents");
        let mut g = StructuredGraph::new(latent, &self.model.encoder, x, features)?;
        let n = g.n();
        let batch = g.batch;
        let ne = neg_entropy(&mut g.tape, g.log_q)?;
        let kl = g.tape.value(ne).item() + n as f64 * std::f64::consts::LN_2;
        let gamma = GumbelDraw::sample(batch, 2 * n, &mut self.noise);
        let potentials: Vec<_> = (0..batch).map(|b| g.potentials(b)).collect::<Result<_>>()?;
        let z_star: Vec<Assignment> = potentials
            .iter()
            .enumerate()
            .map(|(b, p)| structured_map(p, Some(gamma.row(b))))
            .collect::<Result<_>>()?;

        let (obj, dec, recon) = match self.config.estimator.variant {
            EstimatorKind::Direct => {
                let rows: Vec<Vec<f64>> = z_star.iter().flat_map(lowdim_inputs).collect();
                let targets: Vec<&[f64]> = (0..batch).flat_map(|b| std::iter::repeat_n(x.row(b), n + 1)).collect();
                let f = decoder_log_likelihood(&self.model.decoder, &Tensor::from_rows(&rows)?, &Tensor::from_rows(&targets)?)?;
                let mut perturbed = Vec::with_capacity(batch);
                for (b, p) in potentials.iter().enumerate() {
                    let f_tilde = assemble_lowdim(&z_star[b], &f[b * (n + 1)..(b + 1) * (n + 1)]);
                    perturbed.push(structured_perturbed_argmax(p, &f_tilde, eps, Some(gamma.row(b)))?);
                }
                let (wu, wa) = g.score_difference_weights(&perturbed, &z_star, 1.0 / (eps * batch as f64));
                let mut obj = g.tape.weighted_sum(g.unary, wu)?;
                if let (Some(a), Some(wa)) = (g.alpha, wa) {
                    let t = g.tape.weighted_sum(a, wa)?;
                    obj = g.tape.add(obj, t)?;
                }
                let two_hot: Vec<Vec<f64>> = z_star.iter().map(Assignment::two_hot).collect();
                let zi = g.tape.constant(Tensor::from_rows(&two_hot)?);
                let dec = forward_mlp(&self.model.decoder, zi, &mut g.tape)?;
                let bce = g.tape.bce_loss(dec.output, g.x)?;
                let recon = g.tape.value(bce).item() / batch as f64;
                let theta = g.tape.scale(bce, -1.0 / batch as f64);
                (g.tape.add(obj, theta)?, dec, recon)
            }
            EstimatorKind::UnbiasedEnum => {
                let (dec, f) = g.all_states_f(&self.model.decoder, features)?;
                let recon = mean_neg_at(g.tape.value(f), z_star.iter().map(state_index));
                let q = g.tape.exp(g.log_q);
                let qf = g.tape.mul(q, f)?;
                let s = g.tape.sum(qf);
                (g.tape.scale(s, 1.0 / batch as f64), dec, recon)
            }
            EstimatorKind::ScoreFunction => {
                let (dec, f) = g.all_states_f(&self.model.decoder, features)?;
                // Exact posterior samples; perturb-and-MAP draws are not
                // distributed as q.
                let states = latent.states();
                let exact = GumbelDraw::sample(batch, states, &mut self.noise);
                let lq = g.tape.value(g.log_q);
                let samples: Vec<usize> = (0..batch)
                    .map(|b| gumbel_max_sample(lq.row(b), exact.row(b)))
                    .collect::<Result<_>>()?;
                let fv = g.tape.value(f);
                let recon = mean_neg_at(fv, samples.iter().copied());
                let c = 1.0 / batch as f64;
                let mut wh = Tensor::zeros(&[batch, states]);
                let mut wf = Tensor::zeros(&[batch, states]);
                for (b, &s) in samples.iter().enumerate() {
                    wh.row_mut(b)[s] = c * fv.get2(b, s);
                    wf.row_mut(b)[s] = c;
                }
                let a = g.tape.weighted_sum(g.log_q, wh)?;
                let t = g.tape.weighted_sum(f, wf)?;
                (g.tape.add(a, t)?, dec, recon)
            }
            EstimatorKind::Gsm => unreachable!("rejected at construction"),
        };
        let loss = g.tape.sub(ne, obj)?;
        let enc = g.enc.clone();
        self.apply(&g.tape, loss, &enc, &dec)?;
        Ok(self.metrics(recon + kl, kl, eps))
    }

    /// One update on a labeled batch: the encoder term is
    /// `weight * (grad h(x, y) - grad h(x, z*)) / eps`, the decoder term and
    /// the KL are as in [`Trainer::train_step`].
    pub fn semi_supervised_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepMetrics> {
        self.check_batch(x)?;
        let LatentSpec::Categorical { k } = self.model.latent() else {
            return Err(Error::Config("supervision needs a categorical latent".into()));
        };
        check_labels(labels, x.rows(), k)?;
        let eps = self.supervision_epsilon();
        let weight = self.config.supervision.map_or(1.0, |s| s.weight);
        let mut g = CategoricalGraph::new(&self.model.encoder, &self.model.decoder, x)?;
        let gamma = GumbelDraw::sample(g.batch, k, &mut self.noise);
        let states = g.argmax_states(&gamma)?;
        let recon = mean_selected_neg(&g, &states);
        let wh = supervised_weights(&states, labels, k, weight / (eps * g.batch as f64));
        let wf = g.selection_weights(&states);
        let a = g.tape.weighted_sum(g.log_q, wh)?;
        let b = g.tape.weighted_sum(g.f, wf)?;
        let obj = g.tape.add(a, b)?;
        let ne = neg_entropy(&mut g.tape, g.log_q)?;
        let loss = g.tape.sub(ne, obj)?;
        let kl = g.tape.value(ne).item() + (k as f64).ln();
        let (enc, dec) = (g.enc.clone(), g.dec.clone());
        self.apply(&g.tape, loss, &enc, &dec)?;
        Ok(self.metrics(recon + kl, kl, eps))
    }

    fn supervision_epsilon(&self) -> f64 {
        match self.config.estimator.variant {
            EstimatorKind::Direct => self.knob(),
            _ => self.config.estimator.epsilon,
        }
    }

    fn metrics(&self, loss: f64, kl: f64, knob: f64) -> StepMetrics {
        StepMetrics {
            step: self.step,
            loss,
            kl,
            knob,
        }
    }

    /// Backpropagate `loss`, check finiteness, and take one optimizer step.
    fn apply(&mut self, tape: &Tape, loss: NodeId, enc: &MlpNodes, dec: &MlpNodes) -> Result<()> {
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at step {}", self.step)));
        }
        let g = tape.backward(loss)?;
        let (ge, gd) = (enc.grads(&g), dec.grads(&g));
        if !ge.is_finite() || !gd.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", self.step)));
        }
        let (encoder, decoder) = self.model.parts_mut();
        step_params(&mut self.optimizer, encoder, decoder, &ge, &gd)?;
        if !encoder.tensors().iter().chain(decoder.tensors().iter()).all(|t| t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameters after step {}", self.step)));
        }
        self.step += 1;
        Ok(())
    }

    /// One pass over `train` in a permutation seeded by `(seed, epoch)`.
    /// With `labeled`, one labeled batch follows every `interval` unlabeled
    /// batches, cycling through `labeled` in its own seeded order.
    pub fn run_epoch(&mut self, train: &Dataset, epoch: usize, labeled: Option<&Dataset>) -> Result<EpochStats> {
        let bs = self.config.batch_size;
        let interval = match (labeled, self.config.supervision) {
            (Some(_), Some(s)) => Some(s.interval),
            (Some(_), None) => Some(1),
            _ => None,
        };
        let mut lab_iter = match labeled {
            Some(l) => Some(batch_iterator(l, bs, mix(self.config.seed, 2 * epoch as u64 + 1))?),
            None => None,
        };
        let mut lab_cycle = 0u64;
        let mut stats = EpochStats {
            train_loss: 0.0,
            steps: 0,
            labeled_steps: 0,
            batch_ms: Vec::new(),
        };
        let mut seen = 0usize;
        for (i, batch) in batch_iterator(train, bs, mix(self.config.seed, 2 * epoch as u64))?.enumerate() {
            let t0 = Instant::now();
            let m = self.train_step(&batch.x)?;
            stats.batch_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            stats.train_loss += m.loss * batch.x.rows() as f64;
            seen += batch.x.rows();
            stats.steps += 1;
            if let (Some(every), Some(l)) = (interval, labeled) {
                if (i + 1) % every == 0 {
                    let it = lab_iter.as_mut().expect("present with labeled data");
                    let lb = match it.next() {
                        Some(b) => b,
                        None => {
                            lab_cycle += 1;
                            *it = batch_iterator(l, bs, mix(self.config.seed, (lab_cycle << 32) | (2 * epoch as u64 + 1)))?;
                            it.next().expect("labeled set nonempty")
                        }
                    };
                    let labels = lb
                        .labels
                        .ok_or_else(|| Error::Contract("labeled dataset has no labels".into()))?;
                    self.semi_supervised_step(&lb.x, &labels)?;
                    stats.labeled_steps += 1;
                }
            }
        }
        stats.train_loss /= seen.max(1) as f64;
        Ok(stats)
    }
}

fn step_params(opt: &mut Optimizer, enc: &mut MlpParams, dec: &mut MlpParams, ge: &MlpGrads, gd: &MlpGrads) -> Result<()> {
    let mut params: Vec<&mut Tensor> = enc.tensors_mut();
    params.extend(dec.tensors_mut());
    let mut grads = ge.tensors();
    grads.extend(gd.tensors());
    opt.step(&mut params, &grads)
}

/// Deterministic seed derivation (SplitMix64 finalizer).
pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean_selected_neg(g: &CategoricalGraph, states: &[usize]) -> f64 {
    mean_neg_at(g.tape.value(g.f), states.iter().copied())
}

fn mean_neg_at(f: &Tensor, states: impl Iterator<Item = usize>) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (b, z) in states.enumerate() {
        s -= f.get2(b, z);
        n += 1;
    }
    s / n as f64
}

fn check_labels(labels: &[usize], rows: usize, k: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(dim_err("label count", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}

/// `W[b, y_b] += c`, `W[b, z*_b] -= c`.
fn supervised_weights(states: &[usize], labels: &[usize], k: usize, c: f64) -> Tensor {
    let mut w = Tensor::zeros(&[states.len(), k]);
    for (b, (&z, &y)) in states.iter().zip(labels).enumerate() {
        if z != y {
            w.row_mut(b)[y] += c;
            w.row_mut(b)[z] -= c;
        }
    }
    w
}

/// Supervised encoder term `(grad h(x, y) - grad h(x, z*)) / eps`,
/// batch-averaged, with `z* = argmax(h + gamma)`.
pub fn supervised_direct_gradient(
    encoder: &MlpParams,
    x: &Tensor,
    labels: &[usize],
    gamma: &GumbelDraw,
    eps: f64,
) -> Result<MlpGrads> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {eps}")));
    }
    let k = encoder.output_width();
    check_labels(labels, x.rows(), k)?;
    if gamma.rows() != x.rows() || gamma.states() != k {
        return Err(dim_err("Gumbel draw shape", format!("{} x {k}", x.rows()), format!("{} x {}", gamma.rows(), gamma.states())));
    }
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let enc = forward_mlp(encoder, xi, &mut tape)?;
    let log_q = tape.log_softmax(enc.output)?;
    let lq = tape.value(log_q);
    let states: Vec<usize> = (0..x.rows())
        .map(|b| gumbel_max_sample(lq.row(b), gamma.row(b)))
        .collect::<Result<_>>()?;
    let w = supervised_weights(&states, labels, k, 1.0 / (eps * x.rows() as f64));
    Ok(enc.grads(&tape.backward_from(log_q, w)?))
}
