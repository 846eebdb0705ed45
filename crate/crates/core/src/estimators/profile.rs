use std::io::Write;
use std::path::Path;

use super::{gsm_gradient, CategoricalGraph, EstimatorConfig, EstimatorKind};
use crate::error::{Error, Result};
use crate::gumbel::{GumbelDraw, NoiseStream};
use crate::tensor::{MlpGrads, MlpParams, Tensor};

/// Summary of repeated gradient estimates at one knob value.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStats {
    pub variant: EstimatorKind,
    pub knob: f64,
    /// `||mean estimate - reference||_2` over encoder parameters.
    pub bias_l2: f64,
    /// Per-coordinate standard deviation, averaged over coordinates.
    pub mean_std: f64,
    pub trials: usize,
    /// Batch-means standard error of `bias_l2` along the bias direction.
    pub bias_se: f64,
    /// Batch-means standard error of `mean_std`.
    pub std_se: f64,
}

/// A frozen model and observation batch to profile estimators on.
pub struct ProfileProblem<'a> {
    pub encoder: &'a MlpParams,
    pub decoder: &'a MlpParams,
    pub x: &'a Tensor,
}

const GROUPS: usize = 20;

struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Mean over coordinates of the sample standard deviation.
    fn mean_std(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let denom = (self.n - 1) as f64;
        self.m2.iter().map(|s| (s / denom).sqrt()).sum::<f64>() / self.m2.len() as f64
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sample_se(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Bias and spread of each configured estimator's encoder gradient over
/// `trials` independent Gumbel draws, measured against `reference`.
///
/// Trials for grid entry `i` use noise stream `(seed, i)`.
pub fn bias_variance_profile(
    problem: &ProfileProblem<'_>,
    grid: &[EstimatorConfig],
    reference: &MlpGrads,
    trials: usize,
    seed: u64,
) -> Result<Vec<GradientStats>> {
    if trials < 2 {
        return Err(Error::Contract(format!("bias_variance_profile needs trials >= 2, got {trials}")));
    }
    let graph = CategoricalGraph::new(problem.encoder, problem.decoder, problem.x)?;
    let reference = reference.flatten();
    if reference.len() != problem.encoder.param_count() {
        return Err(crate::error::dim_err(
            "reference gradient length",
            problem.encoder.param_count(),
            reference.len(),
        ));
    }
    let dim = reference.len();
    let groups = GROUPS.min(trials / 2).max(1);
    let group_size = trials / groups;

    let mut out = Vec::with_capacity(grid.len());
    for (gi, cfg) in grid.iter().enumerate() {
        cfg.validate()?;
        let mut rng = NoiseStream::new(seed, gi as u64);
        let fixed = match cfg.variant {
            EstimatorKind::UnbiasedEnum => {
                let mut g = CategoricalGraph::new(problem.encoder, problem.decoder, problem.x)?;
                let obj = g.unbiased_objective()?;
                Some(g.gradients(obj)?.encoder.flatten())
            }
            _ => None,
        };
        let mut total = Welford::new(dim);
        let mut group = Welford::new(dim);
        let mut group_means = Vec::with_capacity(groups);
        let mut group_stds = Vec::with_capacity(groups);
        for t in 0..trials {
            let est = match &fixed {
                Some(v) => v.clone(),
                None => one_trial(problem, &graph, cfg, &mut rng)?,
            };
            total.push(&est);
            group.push(&est);
            if group.n == group_size && group_means.len() < groups {
                group_stds.push(group.mean_std());
                group_means.push(std::mem::replace(&mut group, Welford::new(dim)).mean);
            }
            let _ = t;
        }
        let bias_l2 = l2(&total.mean, &reference);
        let bias_se = if bias_l2 > 0.0 {
            let dir: Vec<f64> = total.mean.iter().zip(&reference).map(|(m, r)| (m - r) / bias_l2).collect();
            let proj: Vec<f64> = group_means
                .iter()
                .map(|gm| gm.iter().zip(&reference).zip(&dir).map(|((m, r), d)| (m - r) * d).sum())
                .collect();
            sample_se(&proj)
        } else {
            0.0
        };
        out.push(GradientStats {
            variant: cfg.variant,
            knob: cfg.knob(),
            bias_l2,
            mean_std: total.mean_std(),
            trials,
            bias_se,
            std_se: sample_se(&group_stds),
        });
    }
    Ok(out)
}

fn one_trial(
    problem: &ProfileProblem<'_>,
    graph: &CategoricalGraph,
    cfg: &EstimatorConfig,
    rng: &mut NoiseStream,
) -> Result<Vec<f64>> {
    let gamma = GumbelDraw::sample(graph.batch, graph.k, rng);
    let weights = match cfg.variant {
        EstimatorKind::Direct => {
            let pairs = graph.paired_argmax(&gamma, cfg.epsilon)?;
            if pairs.iter().all(|(a, b)| a == b) {
                return Ok(vec![0.0; problem.encoder.param_count()]);
            }
            graph.direct_weights(&pairs, cfg.epsilon)
        }
        EstimatorKind::ScoreFunction => {
            let states = graph.argmax_states(&gamma)?;
            graph.score_weights(&states)
        }
        EstimatorKind::Gsm => {
            let g = gsm_gradient(problem.encoder, problem.decoder, problem.x, &gamma, cfg.tau)?;
            return Ok(g.encoder.flatten());
        }
        EstimatorKind::UnbiasedEnum => unreachable!("handled by the caller"),
    };
    // Encoder gradients depend on the weights only through a VJP at log_q.
    let g = graph.tape.backward_from(graph.log_q, weights)?;
    Ok(graph.enc.grads(&g).flatten())
}

/// Write `knob,bias_l2,mean_std,trials,bias_se,std_se` rows.
pub fn write_stats_csv(path: &Path, stats: &[GradientStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "knob,bias_l2,mean_std,trials,bias_se,std_se")?;
    for s in stats {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            s.knob, s.bias_l2, s.mean_std, s.trials, s.bias_se, s.std_se
        )?;
    }
    f.flush()?;
    Ok(())
}
