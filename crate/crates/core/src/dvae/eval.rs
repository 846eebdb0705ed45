use super::{DvaeModel, LatentSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::CategoricalGraph;
use crate::gumbel::{GumbelDraw, NoiseStream};
use crate::structured::{decoder_log_likelihood, kl_to_uniform, structured_map, Assignment};
use crate::tensor::{argmax, Tensor};

const CHUNK: usize = 500;

/// Dataset-level evaluation summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean over images of `-f(x, z*)` (averaged over draws) plus KL.
    pub loss: f64,
    /// Standard error of `loss` across images.
    pub loss_se: f64,
    /// Mean KL to the uniform prior.
    pub kl: f64,
    /// Fraction of images whose encoder argmax equals the label; present
    /// for labeled data under a categorical latent.
    pub accuracy: Option<f64>,
    pub mc_samples: usize,
    pub count: usize,
}

/// Per-image losses `mean_s(-f(x, z*_s)) + KL(q(.|x) || uniform)` with
/// `z*_s` the Gumbel-max (or perturb-and-MAP) sample of draw `s`.
pub fn evaluate(model: &DvaeModel, data: &Dataset, mc_samples: usize, rng: &mut NoiseStream) -> Result<EvalReport> {
    if mc_samples == 0 {
        return Err(Error::Contract("evaluate needs mc_samples >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("evaluate on an empty dataset".into()));
    }
    let mut losses = Vec::with_capacity(data.len());
    let mut kl_total = 0.0;
    let mut correct = 0usize;
    let labels = data.labels();
    for start in (0..data.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
        let (x, _) = data.gather(&idx)?;
        let chunk = match model.latent() {
            LatentSpec::Categorical { .. } => categorical_chunk(model, &x, mc_samples, rng)?,
            LatentSpec::Structured { .. } => structured_chunk(model, &x, mc_samples, rng)?,
        };
        for (r, (loss, kl, pred)) in chunk.into_iter().enumerate() {
            losses.push(loss);
            kl_total += kl;
            if let (Some(l), Some(p)) = (labels, pred) {
                correct += (l[idx[r]] == p) as usize;
            }
        }
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = if losses.len() > 1 {
        losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let accuracy = match (labels, model.latent()) {
        (Some(_), LatentSpec::Categorical { .. }) => Some(correct as f64 / n),
        _ => None,
    };
    Ok(EvalReport {
        loss: mean,
        loss_se: (var / n).sqrt(),
        kl: kl_total / n,
        accuracy,
        mc_samples,
        count: losses.len(),
    })
}

type Row = (f64, f64, Option<usize>);

fn categorical_chunk(model: &DvaeModel, x: &Tensor, mc: usize, rng: &mut NoiseStream) -> Result<Vec<Row>> {
    let g = CategoricalGraph::new(model.encoder(), model.decoder(), x)?;
    let mut recon = vec![0.0; g.batch];
    for _ in 0..mc {
        let gamma = GumbelDraw::sample(g.batch, g.k, rng);
        for (b, z) in g.argmax_states(&gamma)?.into_iter().enumerate() {
            recon[b] -= g.f_row(b)[z];
        }
    }
    Ok((0..g.batch)
        .map(|b| {
            let lq = g.log_q_row(b);
            let kl = (lq.iter().map(|l| l.exp() * l).sum::<f64>() + (g.k as f64).ln()).max(0.0);
            (recon[b] / mc as f64 + kl, kl, Some(argmax(lq)))
        })
        .collect())
}

fn structured_chunk(model: &DvaeModel, x: &Tensor, mc: usize, rng: &mut NoiseStream) -> Result<Vec<Row>> {
    let head = model.encoder().forward(x)?;
    let width = model.latent().noise_width();
    let mut rows = Vec::with_capacity(x.rows() * mc);
    let mut targets: Vec<&[f64]> = Vec::with_capacity(x.rows() * mc);
    let mut kls = Vec::with_capacity(x.rows());
    for b in 0..x.rows() {
        let p = model.potentials_from_head(head.row(b))?;
        kls.push(kl_to_uniform(&p)?);
        for _ in 0..mc {
            let gamma = GumbelDraw::sample(1, width, rng);
            let z: Assignment = structured_map(&p, Some(gamma.row(0)))?;
            rows.push(z.two_hot());
            targets.push(x.row(b));
        }
    }
    let f = decoder_log_likelihood(model.decoder(), &Tensor::from_rows(&rows)?, &Tensor::from_rows(&targets)?)?;
    Ok(kls
        .into_iter()
        .enumerate()
        .map(|(b, kl)| {
            let recon = -f[b * mc..(b + 1) * mc].iter().sum::<f64>() / mc as f64;
            (recon + kl, kl, None)
        })
        .collect())
}
