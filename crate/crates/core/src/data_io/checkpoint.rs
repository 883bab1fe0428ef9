//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DEBMCKPT"
//! version    u32
//! config     u64 length + UTF-8 text (the run configuration, opaque here)
//! meta       u64 length + UTF-8 JSON (architectures, train config, step,
//!            RNG positions, loss history)
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank, u64 per dimension
//!              raw f64 values
//! end        8 bytes  "DEBMEND\0"
//! ```
//!
//! Loading parses the whole file before building anything, so a damaged file
//! yields an error and never a partially restored model.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy_model::{EnergyArch, EnergyFunction, EnergyModel};
use crate::error::{CheckpointError, Error, Result};
use crate::generator::{GeneratorArch, GeneratorModel};
use crate::param::Parameter;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::training::{LossHistory, TrainConfig, TrainState, Trainer};

const MAGIC: &[u8; 8] = b"DEBMCKPT";
const END: &[u8; 8] = b"DEBMEND\0";
pub const VERSION: u32 = 1;

#[derive(Clone)]
pub struct Checkpoint {
    /// Free-form run configuration stored alongside the models.
    pub config_text: String,
    pub train_config: TrainConfig,
    pub dem: EnergyModel,
    pub gen: GeneratorModel,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train_config: TrainConfig,
    dem_arch: EnergyArch,
    gen_arch: GeneratorArch,
    step: u64,
    prior_rng: RngState,
    batch_rng: RngState,
    history: LossHistory,
    dem_opt_len: usize,
    dgm_opt_len: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    CheckpointError::Corrupt(msg.into()).into()
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config_text: impl Into<String>) -> Self {
        Self {
            config_text: config_text.into(),
            train_config: trainer.config.clone(),
            dem: trainer.dem.clone(),
            gen: trainer.gen.clone(),
            state: trainer.state.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::resume(self.dem, self.gen, self.train_config, self.state)
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .dem
            .parameters()
            .into_iter()
            .chain(self.gen.parameters())
            .map(|p| (p.name().to_string(), p.value.clone()))
            .collect();
        for (i, layer) in self.gen.layers.iter().enumerate() {
            if let Some(bn) = &layer.norm {
                let w = bn.running.mean.len();
                out.push((
                    format!("gen.layers.{i}.bn.running_mean"),
                    Tensor::new(vec![w], bn.running.mean.clone()).expect("width"),
                ));
                out.push((
                    format!("gen.layers.{i}.bn.running_var"),
                    Tensor::new(vec![w], bn.running.var.clone()).expect("width"),
                ));
            }
        }
        for (prefix, opt) in [("opt.dem", &self.state.dem_opt), ("opt.dgm", &self.state.dgm_opt)] {
            out.extend(
                opt.accumulators()
                    .iter()
                    .enumerate()
                    .map(|(k, t)| (format!("{prefix}.{k}"), t.clone())),
            );
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            train_config: self.train_config.clone(),
            dem_arch: self.dem.arch().clone(),
            gen_arch: self.gen.arch().clone(),
            step: self.state.step,
            prior_rng: RngState::capture(&self.state.prior_rng),
            batch_rng: RngState::capture(&self.state.batch_rng),
            history: self.state.history.clone(),
            dem_opt_len: self.state.dem_opt.accumulators().len(),
            dgm_opt_len: self.state.dgm_opt.accumulators().len(),
        };
        let meta = serde_json::to_string(&meta).expect("meta serializes");
        let tensors = self.named_tensors();

        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend(VERSION.to_le_bytes());
        for text in [&self.config_text, &meta] {
            b.extend((text.len() as u64).to_le_bytes());
            b.extend_from_slice(text.as_bytes());
        }
        b.extend((tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            b.extend((name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend(v.to_le_bytes());
            }
        }
        b.extend_from_slice(END);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let config_text = r.text()?;
        let meta: Meta = serde_json::from_str(&r.text()?)
            .map_err(|e| corrupt(format!("metadata: {e}")))?;

        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor {name} has an absurd shape")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.take(8).ok() != Some(&END[..]) {
            return Err(corrupt("missing end marker"));
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(corrupt(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let fill = |params: Vec<&mut Parameter>, take: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>| -> Result<()> {
            for p in params {
                let shape = p.value.shape().to_vec();
                p.value = take(p.name(), &shape)?;
            }
            Ok(())
        };

        let mut dem = EnergyModel::zeros(meta.dem_arch).map_err(|e| corrupt(e.to_string()))?;
        fill(dem.parameters_mut(), &mut take)?;
        let mut gen = GeneratorModel::zeros(meta.gen_arch).map_err(|e| corrupt(e.to_string()))?;
        fill(gen.parameters_mut(), &mut take)?;
        for (i, layer) in gen.layers.iter_mut().enumerate() {
            if let Some(bn) = &mut layer.norm {
                let w = bn.running.mean.len();
                bn.running.mean = take(&format!("gen.layers.{i}.bn.running_mean"), &[w])?.into_data();
                bn.running.var = take(&format!("gen.layers.{i}.bn.running_var"), &[w])?.into_data();
            }
        }

        let mut state = TrainState::new(&meta.train_config);
        state.step = meta.step;
        state.prior_rng = meta.prior_rng.restore();
        state.batch_rng = meta.batch_rng.restore();
        state.history = meta.history;
        let dem_shapes: Vec<Vec<usize>> = dem.parameters().iter().map(|p| p.value.shape().to_vec()).collect();
        let gen_shapes: Vec<Vec<usize>> = gen.parameters().iter().map(|p| p.value.shape().to_vec()).collect();
        for (prefix, len, shapes, opt) in [
            ("opt.dem", meta.dem_opt_len, &dem_shapes, &mut state.dem_opt),
            ("opt.dgm", meta.dgm_opt_len, &gen_shapes, &mut state.dgm_opt),
        ] {
            if len == 0 {
                continue;
            }
            if len != shapes.len() {
                return Err(corrupt(format!("{prefix} has {len} accumulators for {} parameters", shapes.len())));
            }
            let acc = shapes
                .iter()
                .enumerate()
                .map(|(k, s)| take(&format!("{prefix}.{k}"), s))
                .collect::<Result<Vec<_>>>()?;
            opt.set_accumulators(acc);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config_text,
            train_config: meta.train_config,
            dem,
            gen,
            state,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let len = usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))?;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| corrupt("text section is not UTF-8"))
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes();
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
