//! Checkpoint container: `checkpoint.bin` holds tensors as little-endian
//! `f64` with their shapes; `checkpoint.json` describes them. The manifest
//! is written last, so its presence marks a complete checkpoint.
//!
//! Binary layout: magic `ARGMXCKP`, `u32` version, `u32` tensor count, then
//! per tensor `u32` rank, `u64` extents and the raw values. Tensor order is
//! encoder (weight, bias per layer), decoder, then Adam first and second
//! moments when present.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DvaeModel, LatentSpec, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::gumbel::NoiseStream;
use crate::tensor::{Adam, Dense, LayerSpec, MlpParams, Optimizer, OptimizerKind, Tensor};

pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ARGMXCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub latent: LatentSpec,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub encoder_layers: Vec<LayerSpec>,
    pub decoder_layers: Vec<LayerSpec>,
    pub optimizer: OptimizerKind,
    pub optimizer_steps: u64,
    pub noise_seed: u64,
    pub noise_stream: u64,
    pub noise_word_pos: u64,
    pub tensors: usize,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(CHECKPOINT_JSON))?)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn encode(tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<Tensor>> {
    let err = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    };
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() < at + n {
            return Err(err(bytes.len(), "truncated checkpoint"));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(err(0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(err(8, &format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize))
            .collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let raw = take(8 * len)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(Tensor::new(shape, data)?);
    }
    if at != bytes.len() {
        return Err(err(at, "trailing bytes after tensors"));
    }
    Ok(out)
}

fn rebuild(specs: &[LayerSpec], tensors: &mut impl Iterator<Item = Tensor>) -> Result<MlpParams> {
    let mut layers = Vec::with_capacity(specs.len());
    for s in specs {
        let (weight, bias) = match (tensors.next(), tensors.next()) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(Error::Contract("checkpoint holds fewer tensors than its layers need".into())),
        };
        if weight.shape() != [s.input, s.output] {
            return Err(Error::Contract(format!("checkpoint weight shape {:?} does not match {s:?}", weight.shape())));
        }
        layers.push(Dense {
            weight,
            bias,
            activation: s.activation,
        });
    }
    MlpParams::from_layers(layers)
}

impl Trainer {
    /// Write model, optimizer and noise state to `dir`.
    pub fn save_checkpoint(&self, dir: &Path, epoch: usize, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tensors: Vec<&Tensor> = self.model.encoder().tensors();
        tensors.extend(self.model.decoder().tensors());
        let moments: Vec<Tensor> = match &self.optimizer {
            Optimizer::Adam(a) if !a.m.is_empty() => a
                .m
                .iter()
                .chain(&a.v)
                .map(|v| Tensor::vector(v.clone()))
                .collect(),
            _ => Vec::new(),
        };
        tensors.extend(moments.iter());
        let word_pos = u64::try_from(self.noise.word_pos())
            .map_err(|_| Error::Contract("noise stream position exceeds 64 bits".into()))?;
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            latent: self.model.latent(),
            step: self.step,
            epoch,
            config_hash: config_hash.to_string(),
            encoder_layers: self.model.encoder().specs(),
            decoder_layers: self.model.decoder().specs(),
            optimizer: self.optimizer.kind(),
            optimizer_steps: match &self.optimizer {
                Optimizer::Adam(a) => a.t,
                Optimizer::Sgd(_) => 0,
            },
            noise_seed: self.noise.seed(),
            noise_stream: self.noise.stream(),
            noise_word_pos: word_pos,
            tensors: tensors.len(),
        };
        write_atomic(&dir.join(CHECKPOINT_BIN), &encode(&tensors))?;
        write_atomic(&dir.join(CHECKPOINT_JSON), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Restore a trainer saved by [`Trainer::save_checkpoint`]. The caller
    /// supplies the configuration; the learning rate is taken from it.
    pub fn load_checkpoint(dir: &Path, config: TrainConfig) -> Result<(Trainer, CheckpointManifest)> {
        let manifest = CheckpointManifest::read(dir)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", manifest.version)));
        }
        let bin = dir.join(CHECKPOINT_BIN);
        let tensors = decode(&bin, &std::fs::read(&bin)?)?;
        if tensors.len() != manifest.tensors {
            return Err(Error::Contract(format!(
                "manifest lists {} tensors, container holds {}",
                manifest.tensors,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let encoder = rebuild(&manifest.encoder_layers, &mut it)?;
        let decoder = rebuild(&manifest.decoder_layers, &mut it)?;
        let model = DvaeModel::from_parts(manifest.latent, encoder, decoder)?;
        let rest: Vec<Vec<f64>> = it.map(Tensor::into_data).collect();
        if config.optimizer != manifest.optimizer {
            return Err(Error::Config("checkpoint optimizer differs from the configured one".into()));
        }
        let optimizer = match manifest.optimizer {
            OptimizerKind::Sgd => Optimizer::new(OptimizerKind::Sgd, config.learning_rate),
            OptimizerKind::Adam => {
                let mut a = Adam::new(config.learning_rate);
                a.t = manifest.optimizer_steps;
                if !rest.is_empty() {
                    let half = rest.len() / 2;
                    a.m = rest[..half].to_vec();
                    a.v = rest[half..].to_vec();
                }
                Optimizer::Adam(a)
            }
        };
        let noise = NoiseStream::at(manifest.noise_seed, manifest.noise_stream, manifest.noise_word_pos as u128);
        let trainer = Trainer::from_state(model, config, optimizer, noise, manifest.step)?;
        Ok((trainer, manifest))
    }
}
