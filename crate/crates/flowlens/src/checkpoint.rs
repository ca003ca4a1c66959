//! FCKP checkpoints: model parameters, optimizer state, training counters and
//! an echo of the training configuration.
//!
//! Layout: magic `FCKP`, version byte, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name and one FMAP tensor. Parameters keep
//! their own names; optimizer moments live under `adam.m.` / `adam.v.`,
//! counters under `train.` and configuration under `config.`. Scalars are
//! one-element f64 tensors; `u64` values are stored as two `u32` halves.

use std::collections::HashMap;
use std::path::Path;

use flowlens_core::losses::LossWeights;
use flowlens_core::model::ModelConfig;
use flowlens_core::training::{Adam, AdamConfig, TrainConfig, TrainProgress};
use flowlens_core::{EnhancerModel, Error as CoreError, Precision, Real, Tensor};

use crate::error::{CliError, Result};
use crate::fmap::{self, AnyTensor};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u8 = 1;

pub fn encode_entries(entries: &[(String, AnyTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match t {
            AnyTensor::F32(t) => out.extend(fmap::encode(t)),
            AnyTensor::F64(t) => out.extend(fmap::encode(t)),
        }
    }
    out
}

pub fn decode_entries(bytes: &[u8], origin: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let bad = |r: &str| CliError::format(origin, r.to_string());
    if bytes.len() < 9 {
        return Err(bad("truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(CliError::format(
            origin,
            format!("unsupported checkpoint version {}", bytes[4]),
        ));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut pos = 9;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        if bytes.len() < pos + 2 {
            return Err(bad("truncated checkpoint entry"));
        }
        let len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| bad("truncated checkpoint entry name"))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| bad("entry name is not UTF-8"))?
            .to_string();
        pos += len;
        let (t, used) = fmap::decode_prefix(&bytes[pos..], origin)?;
        pos += used;
        entries.push((name, t));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last checkpoint entry"));
    }
    Ok(entries)
}

/// Complete training state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config: TrainConfig,
    pub model: EnhancerModel<T>,
    pub adam: Adam<T>,
    pub progress: TrainProgress,
}

fn scalar(v: f64) -> AnyTensor {
    AnyTensor::F64(Tensor::scalar(v))
}

fn word(v: u64) -> AnyTensor {
    AnyTensor::F64(Tensor::new(&[2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]).unwrap())
}

fn flag(b: bool) -> AnyTensor {
    scalar(if b { 1.0 } else { 0.0 })
}

fn config_entries(c: &TrainConfig) -> Vec<(&'static str, AnyTensor)> {
    let m = &c.model;
    let mut v = vec![
        ("size", scalar(m.size as f64)),
        ("scales", scalar(m.scales as f64)),
        ("steps", scalar(m.steps as f64)),
        ("flow1_steps", scalar(m.flow1_steps as f64)),
        ("flow1_injector", flag(m.flow1_injector)),
        ("hidden", scalar(m.hidden as f64)),
        ("cond_width", scalar(m.cond_width as f64)),
        ("cond_features", scalar(m.cond_features as f64)),
        ("residual_blocks", scalar(m.residual_blocks as f64)),
        ("mri_prior", flag(m.mri_prior)),
        ("cond_base", flag(m.cond_base)),
        ("low_size", scalar(c.low_size as f64)),
        ("lr", scalar(c.adam.lr)),
        ("beta1", scalar(c.adam.beta1)),
        ("beta2", scalar(c.adam.beta2)),
        ("eps", scalar(c.adam.eps)),
        ("batch_size", scalar(c.batch_size as f64)),
        ("epochs", scalar(c.epochs as f64)),
        ("alpha", scalar(c.weights.alpha)),
        ("lambda_guide", scalar(c.weights.guide)),
        ("lambda_dc", scalar(c.weights.dc)),
        ("guide", flag(c.guide)),
        ("dc", flag(c.dc)),
        ("seed", word(c.seed)),
        ("clip_norm", scalar(c.clip_norm)),
        ("dequantization", scalar(c.dequantization)),
        ("augment", flag(c.augment)),
        ("checkpoint_every", scalar(c.checkpoint_every as f64)),
    ];
    if !c.lr_milestones.is_empty() {
        let ms: Vec<f64> = c.lr_milestones.iter().map(|&m| m as f64).collect();
        v.push((
            "lr_milestones",
            AnyTensor::F64(Tensor::new(&[ms.len()], ms).unwrap()),
        ));
    }
    v
}

struct Reader<'a> {
    map: HashMap<&'a str, &'a AnyTensor>,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn values(&self, name: &str) -> Result<Vec<f64>> {
        self.map
            .get(name)
            .map(|t| t.to_f64_vec())
            .ok_or_else(|| CliError::format(self.origin, format!("missing entry `{name}`")))
    }

    fn f64(&self, name: &str) -> Result<f64> {
        match self.values(name)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(CliError::format(
                self.origin,
                format!("entry `{name}` is not a scalar"),
            )),
        }
    }

    fn usize(&self, name: &str) -> Result<usize> {
        let v = self.f64(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(CliError::format(
                self.origin,
                format!("entry `{name}` is not a count: {v}"),
            ));
        }
        Ok(v as usize)
    }

    fn bool(&self, name: &str) -> Result<bool> {
        Ok(self.f64(name)? != 0.0)
    }

    fn u64(&self, name: &str) -> Result<u64> {
        match self.values(name)?.as_slice() {
            [hi, lo] => Ok(((*hi as u64) << 32) | (*lo as u64)),
            _ => Err(CliError::format(
                self.origin,
                format!("entry `{name}` is not a 64-bit word"),
            )),
        }
    }
}

fn read_config(r: &Reader) -> Result<TrainConfig> {
    let c = |k: &str| format!("config.{k}");
    let model = ModelConfig {
        size: r.usize(&c("size"))?,
        scales: r.usize(&c("scales"))?,
        steps: r.usize(&c("steps"))?,
        flow1_steps: r.usize(&c("flow1_steps"))?,
        flow1_injector: r.bool(&c("flow1_injector"))?,
        hidden: r.usize(&c("hidden"))?,
        cond_width: r.usize(&c("cond_width"))?,
        cond_features: r.usize(&c("cond_features"))?,
        residual_blocks: r.usize(&c("residual_blocks"))?,
        mri_prior: r.bool(&c("mri_prior"))?,
        cond_base: r.bool(&c("cond_base"))?,
    };
    let lr_milestones = if r.map.contains_key(c("lr_milestones").as_str()) {
        r.values(&c("lr_milestones"))?
            .into_iter()
            .map(|v| v as usize)
            .collect()
    } else {
        Vec::new()
    };
    Ok(TrainConfig {
        model,
        low_size: r.usize(&c("low_size"))?,
        adam: AdamConfig {
            lr: r.f64(&c("lr"))?,
            beta1: r.f64(&c("beta1"))?,
            beta2: r.f64(&c("beta2"))?,
            eps: r.f64(&c("eps"))?,
        },
        batch_size: r.usize(&c("batch_size"))?,
        epochs: r.usize(&c("epochs"))?,
        weights: LossWeights {
            alpha: r.f64(&c("alpha"))?,
            guide: r.f64(&c("lambda_guide"))?,
            dc: r.f64(&c("lambda_dc"))?,
        },
        guide: r.bool(&c("guide"))?,
        dc: r.bool(&c("dc"))?,
        seed: r.u64(&c("seed"))?,
        clip_norm: r.f64(&c("clip_norm"))?,
        dequantization: r.f64(&c("dequantization"))?,
        augment: r.bool(&c("augment"))?,
        lr_milestones,
        checkpoint_every: r.usize(&c("checkpoint_every"))?,
    })
}

const RESERVED: [&str; 3] = ["config.", "train.", "adam."];

fn is_parameter(name: &str) -> bool {
    !RESERVED.iter().any(|p| name.starts_with(p))
}

/// Precision of the parameters stored in a checkpoint file.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let entries = decode_entries(&fsutil::read(path)?, path)?;
    entries
        .iter()
        .find(|(n, _)| is_parameter(n))
        .map(|(_, t)| t.precision())
        .ok_or_else(|| CliError::format(path, "checkpoint holds no parameters"))
}

/// Copies every parameter of `model` from `entries`, rejecting missing,
/// misshapen, unknown or wrong-precision entries.
fn load_params<T: Real>(
    model: &mut EnhancerModel<T>,
    entries: &[(String, AnyTensor)],
    origin: &Path,
) -> Result<()> {
    let mut params: HashMap<&str, Tensor<T>> = HashMap::new();
    for (name, t) in entries.iter().filter(|(n, _)| is_parameter(n)) {
        if t.precision() != T::PRECISION {
            return Err(CliError::format(
                origin,
                format!(
                    "parameter `{name}` is {}-bit, expected {}-bit",
                    t.precision().bits(),
                    T::PRECISION.bits()
                ),
            ));
        }
        params.insert(name.as_str(), t.cast());
    }
    model.params_mut().load_from(|n| params.get(n))?;
    if let Some((name, _)) = entries
        .iter()
        .find(|(n, _)| is_parameter(n) && model.params().id(n).is_none())
    {
        return Err(CoreError::Architecture(format!("unknown parameter `{name}`")).into());
    }
    Ok(())
}

impl<T: Real> Checkpoint<T> {
    pub fn to_entries(&self) -> Vec<(String, AnyTensor)> {
        let mut out: Vec<(String, AnyTensor)> = config_entries(&self.config)
            .into_iter()
            .map(|(k, v)| (format!("config.{k}"), v))
            .collect();
        let p = self.progress;
        out.push(("train.epoch".into(), scalar(p.epoch as f64)));
        out.push(("train.global_step".into(), word(p.global_step)));
        out.push(("train.clip_events".into(), word(p.clip_events)));
        out.push((
            "train.initialized".into(),
            flag(self.model.is_initialized()),
        ));
        out.push(("adam.step".into(), word(self.adam.step)));
        out.push(("adam.skipped".into(), word(self.adam.skipped)));
        for (name, t) in self.model.params().iter() {
            out.push((name.to_string(), AnyTensor::from_tensor(t)));
        }
        for (k, (name, _)) in self.model.params().iter().enumerate() {
            out.push((
                format!("adam.m.{name}"),
                AnyTensor::from_tensor(&self.adam.first[k]),
            ));
            out.push((
                format!("adam.v.{name}"),
                AnyTensor::from_tensor(&self.adam.second[k]),
            ));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_entries(&self.to_entries())
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let entries = decode_entries(bytes, origin)?;
        let reader = Reader {
            map: entries.iter().map(|(n, t)| (n.as_str(), t)).collect(),
            origin,
        };
        let config = read_config(&reader)?;
        let mut model = EnhancerModel::<T>::new(config.model.clone(), config.seed)?;
        load_params(&mut model, &entries, origin)?;
        model.set_initialized(reader.bool("train.initialized")?);
        let mut adam = Adam::new(model.params(), config.adam);
        adam.step = reader.u64("adam.step")?;
        adam.skipped = reader.u64("adam.skipped")?;
        for (k, (name, p)) in model.params().iter().enumerate() {
            for (prefix, slot) in [
                ("adam.m.", &mut adam.first[k]),
                ("adam.v.", &mut adam.second[k]),
            ] {
                let key = format!("{prefix}{name}");
                let t = reader
                    .map
                    .get(key.as_str())
                    .ok_or_else(|| CliError::format(origin, format!("missing entry `{key}`")))?;
                if t.shape() != p.shape() || t.precision() != T::PRECISION {
                    return Err(CliError::format(
                        origin,
                        format!("entry `{key}` does not match its parameter"),
                    ));
                }
                *slot = t.cast();
            }
        }
        let progress = TrainProgress {
            epoch: reader.usize("train.epoch")?,
            global_step: reader.u64("train.global_step")?,
            clip_events: reader.u64("train.clip_events")?,
        };
        Ok(Checkpoint {
            config,
            model,
            adam,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?, path)
    }
}

/// Loads only the parameters of a checkpoint into a fresh model built from
/// `config`, for checking a file against an expected architecture.
pub fn load_model_as<T: Real>(path: &Path, config: ModelConfig) -> Result<EnhancerModel<T>> {
    let entries = decode_entries(&fsutil::read(path)?, path)?;
    let mut model = EnhancerModel::<T>::new(config, 0)?;
    load_params(&mut model, &entries, path)?;
    model.set_initialized(true);
    Ok(model)
}
