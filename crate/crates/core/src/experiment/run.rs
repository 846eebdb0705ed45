use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BiasVarianceSpec, DataSpec, ExperimentKind, ExperimentSpec};
use crate::data::{binarize, epoch_order, load_idx_dir, synthetic_dataset, Dataset, Split};
use crate::dvae::{evaluate, CheckpointManifest, DvaeModel, LatentSpec, ModelSpec, Trainer, CHECKPOINT_JSON};
use crate::error::{Error, Result};
use crate::estimators::{bias_variance_profile, unbiased_gradient, write_stats_csv, EstimatorConfig, ProfileProblem};
use crate::gumbel::NoiseStream;

const METRICS_HEADER: &str = "epoch,step,train_elbo,test_elbo,epsilon,accuracy";
const TIMING_HEADER: &str = "epoch,wall_ms,median_batch_ms";
const INIT_STREAM: u64 = 7;
const EVAL_SALT: u64 = 0x00E7_A100;
const LABEL_SALT: u64 = 0x00AB_E150;
const PROFILE_SALT: u64 = 0x0B1A_5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub final_test_loss: f64,
    pub wall_seconds: f64,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    /// Test loss after the last epoch; for `structured_compare`, the lowest
    /// over variants.
    pub final_test_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
    pub wall_seconds: f64,
    pub config_hash: String,
    pub epochs: usize,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub variants: BTreeMap<String, VariantSummary>,
}

impl Summary {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join("summary.json"))?)?)
    }
}

pub fn run(spec: &ExperimentSpec) -> Result<Summary> {
    run_with_progress(spec, &mut |_| {})
}

/// Execute `spec`, reporting one line per epoch through `progress`.
pub fn run_with_progress(spec: &ExperimentSpec, progress: &mut dyn FnMut(&str)) -> Result<Summary> {
    spec.validate()?;
    let t0 = Instant::now();
    let out = spec.output.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", out.display())))?;
    std::fs::write(out.join("spec.json"), spec.to_json())
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", out.display())))?;
    let hash = spec.config_hash();
    let (train, test) = load_data(&spec.data, &out)?;
    if train.pixels() != spec.model.input {
        return Err(Error::Config(format!(
            "model.input is {} but images have {} pixels",
            spec.model.input,
            train.pixels()
        )));
    }
    let mut summary = Summary {
        kind: spec.kind,
        final_test_loss: f64::NAN,
        final_accuracy: None,
        wall_seconds: 0.0,
        config_hash: hash.clone(),
        epochs: spec.train.epochs,
        steps: 0,
        variants: BTreeMap::new(),
    };
    match spec.kind {
        ExperimentKind::Train | ExperimentKind::SemiSupervised => {
            let labeled = match &spec.train.supervision {
                Some(s) => Some(select_labeled(&train, s.labels, spec.train.seed)?),
                None => None,
            };
            let r = train_protocol(spec, &spec.model, &train, &test, labeled.as_ref(), &out, &hash, progress)?;
            summary.final_test_loss = r.final_test_loss;
            summary.final_accuracy = r.final_accuracy;
            summary.steps = r.steps;
        }
        ExperimentKind::BiasVariance => {
            let bv = spec.bias_variance.as_ref().expect("validated");
            let r = bias_variance_protocol(spec, bv, &train, &test, &out, &hash, progress)?;
            summary.final_test_loss = r.final_test_loss;
            summary.steps = r.steps;
        }
        ExperimentKind::StructuredCompare => {
            let LatentSpec::Structured { n, .. } = spec.model.latent else {
                unreachable!("validated")
            };
            let variants = spec.structured.as_ref().map(|s| s.variants.clone()).unwrap_or_else(super::default_pairwise);
            let mut table = String::from("variant,epoch,test_elbo,wall_ms\n");
            let mut best = f64::INFINITY;
            for v in variants {
                let name = serde_json::to_value(v)?.as_str().expect("unit variant").to_string();
                let model = ModelSpec {
                    latent: LatentSpec::Structured { n, pairwise: v },
                    ..spec.model
                };
                let dir = out.join(&name);
                let tv = Instant::now();
                let r = train_protocol(spec, &model, &train, &test, None, &dir, &hash, &mut |line| {
                    progress(&format!("[{name}] {line}"))
                })?;
                for (epoch, loss, wall) in &r.history {
                    table.push_str(&format!("{name},{epoch},{loss},{wall:.3}\n"));
                }
                best = best.min(r.final_test_loss);
                summary.steps += r.steps;
                summary.variants.insert(
                    name,
                    VariantSummary {
                        final_test_loss: r.final_test_loss,
                        wall_seconds: tv.elapsed().as_secs_f64(),
                    },
                );
            }
            std::fs::write(out.join("structured_compare.csv"), table)?;
            summary.final_test_loss = best;
        }
    }
    summary.wall_seconds = t0.elapsed().as_secs_f64();
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

fn load_data(spec: &DataSpec, out: &Path) -> Result<(Dataset, Dataset)> {
    match spec {
        DataSpec::Idx {
            dir,
            train_limit,
            test_limit,
            binarize: mode,
            binarize_seed,
        } => {
            let mut train = load_idx_dir(dir, Split::Train)?;
            let mut test = load_idx_dir(dir, Split::Test)?;
            if let Some(n) = train_limit {
                train = train.head(*n);
            }
            if let Some(n) = test_limit {
                test = test.head(*n);
            }
            Ok((
                binarize(&train, *mode, *binarize_seed),
                binarize(&test, *mode, binarize_seed.wrapping_add(1)),
            ))
        }
        DataSpec::Synthetic {
            generator,
            train,
            test,
            seed,
        } => {
            let s = synthetic_dataset(*generator, train + test, *seed)?;
            if let Some(m) = &s.mixture {
                m.write_json(&out.join("synthetic_params.json"))?;
            }
            let tr: Vec<usize> = (0..*train).collect();
            let te: Vec<usize> = (*train..train + test).collect();
            Ok((s.dataset.subset(&tr)?, s.dataset.subset(&te)?.with_split(Split::Test)))
        }
    }
}

/// `count` labeled images, as class-balanced as the data allows, chosen
/// in a seeded order.
pub(crate) fn select_labeled(train: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::Config("supervision needs a labeled training set".into()))?;
    if count > train.len() {
        return Err(Error::Config(format!("{count} labels requested from {} images", train.len())));
    }
    let classes = train.num_classes().unwrap_or(1).max(1);
    let quota = count.div_ceil(classes);
    let order = epoch_order(train.len(), crate::dvae::mix(seed, LABEL_SALT));
    let mut taken = vec![0usize; classes];
    let mut chosen = Vec::with_capacity(count);
    for &i in &order {
        if chosen.len() == count {
            break;
        }
        if taken[labels[i]] < quota {
            taken[labels[i]] += 1;
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == count {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    train.subset(&chosen)
}

struct RunResult {
    final_test_loss: f64,
    final_accuracy: Option<f64>,
    steps: u64,
    /// `(epoch, test_elbo, cumulative wall_ms)`.
    history: Vec<(usize, f64, f64)>,
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Keep the header and the rows whose first column is at most `epoch`.
fn truncate_csv(path: &Path, header: &str, epoch: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let e: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        if e <= epoch {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn train_protocol(
    spec: &ExperimentSpec,
    model_spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    labeled: Option<&Dataset>,
    dir: &Path,
    hash: &str,
    progress: &mut dyn FnMut(&str),
) -> Result<RunResult> {
    std::fs::create_dir_all(dir)?;
    let metrics = dir.join("metrics.csv");
    let timing = dir.join("timing.csv");
    let config = spec.train;
    let (mut trainer, start) = if dir.join(CHECKPOINT_JSON).exists() {
        let manifest = CheckpointManifest::read(dir)?;
        if manifest.config_hash != hash {
            return Err(Error::Config(format!(
                "{} holds a checkpoint from a different spec (hash {})",
                dir.display(),
                manifest.config_hash
            )));
        }
        let (t, m) = Trainer::load_checkpoint(dir, config)?;
        if t.model().latent() != model_spec.latent {
            return Err(Error::Config("checkpoint latent differs from the spec".into()));
        }
        truncate_csv(&metrics, METRICS_HEADER, m.epoch)?;
        truncate_csv(&timing, TIMING_HEADER, m.epoch)?;
        progress(&format!("resuming after epoch {}", m.epoch));
        (t, m.epoch)
    } else {
        let model = DvaeModel::new(model_spec, &mut NoiseStream::new(config.seed, INIT_STREAM))?;
        std::fs::write(&metrics, format!("{METRICS_HEADER}\n"))?;
        std::fs::write(&timing, format!("{TIMING_HEADER}\n"))?;
        (Trainer::new(model, config)?, 0)
    };
    for epoch in start + 1..=config.epochs {
        let t0 = Instant::now();
        let stats = trainer.run_epoch(train, epoch - 1, labeled)?;
        let mut eval_rng = NoiseStream::new(crate::dvae::mix(config.seed, EVAL_SALT), epoch as u64);
        let report = evaluate(trainer.model(), test, spec.eval_mc_samples, &mut eval_rng)?;
        if !report.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite test loss after epoch {epoch}")));
        }
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let acc = report.accuracy.map(|a| a.to_string()).unwrap_or_default();
        append(
            &metrics,
            &format!(
                "{epoch},{},{},{},{},{acc}",
                trainer.step(),
                stats.train_loss,
                report.loss,
                trainer.knob()
            ),
        )?;
        append(&timing, &format!("{epoch},{wall_ms:.3},{:.3}", median(&stats.batch_ms)))?;
        if epoch % spec.checkpoint_every == 0 || epoch == config.epochs {
            trainer.save_checkpoint(dir, epoch, hash)?;
        }
        progress(&format!(
            "epoch {epoch}/{}: train {:.3} test {:.3}{} ({:.1} s)",
            config.epochs,
            stats.train_loss,
            report.loss,
            report.accuracy.map(|a| format!(" acc {a:.3}")).unwrap_or_default(),
            wall_ms / 1e3
        ));
    }
    let rows = read_rows(&metrics)?;
    let times = read_rows(&timing)?;
    let last = rows
        .last()
        .ok_or_else(|| Error::Config("run finished without any epochs (train.epochs = 0?)".into()))?;
    let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
    let mut wall = 0.0;
    let history = rows
        .iter()
        .zip(&times)
        .map(|(r, t)| {
            wall += parse(&t[1]);
            (r[0].parse().unwrap_or(0), parse(&r[3]), wall)
        })
        .collect();
    Ok(RunResult {
        final_test_loss: parse(&last[3]),
        final_accuracy: last.get(5).filter(|s| !s.is_empty()).map(|s| parse(s)),
        steps: trainer.step(),
        history,
    })
}

fn bias_variance_protocol(
    spec: &ExperimentSpec,
    bv: &BiasVarianceSpec,
    train: &Dataset,
    test: &Dataset,
    out: &Path,
    hash: &str,
    progress: &mut dyn FnMut(&str),
) -> Result<RunResult> {
    let images = train.head(bv.images);
    let pre_dir: PathBuf = out.join("pretrain");
    let r = train_protocol(spec, &spec.model, train, test, None, &pre_dir, hash, progress)?;
    let (trainer, _) = Trainer::load_checkpoint(&pre_dir, spec.train)?;
    let model = trainer.into_model();
    let x = images.images();
    let reference = unbiased_gradient(model.encoder(), model.decoder(), x)?.encoder;
    let problem = ProfileProblem {
        encoder: model.encoder(),
        decoder: model.decoder(),
        x,
    };
    for (i, sweep) in bv.sweeps.iter().enumerate() {
        let base = EstimatorConfig::new(sweep.variant);
        let grid: Vec<EstimatorConfig> = if sweep.knobs.is_empty() {
            vec![base]
        } else {
            sweep.knobs.iter().map(|&k| base.with_knob(k)).collect()
        };
        let seed = crate::dvae::mix(spec.train.seed, PROFILE_SALT + i as u64);
        let stats = bias_variance_profile(&problem, &grid, &reference, bv.trials, seed)?;
        write_stats_csv(&out.join(format!("bias_variance_{}.csv", sweep.variant)), &stats)?;
        for s in &stats {
            progress(&format!(
                "{} knob {}: bias {:.4e} (se {:.1e}) std {:.4e} (se {:.1e})",
                s.variant, s.knob, s.bias_l2, s.bias_se, s.mean_std, s.std_se
            ));
        }
    }
    Ok(r)
}
