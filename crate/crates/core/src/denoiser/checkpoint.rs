//! Versioned binary checkpoints.
//!
//! Layout (little-endian, magic `MSDNZ01`):
//!
//! ```text
//! magic[7]
//! u32 header_len, header bytes (TOML: config, schedule bounds, fps, train state)
//! u32 param_count
//! per param: u16 name_len, name, u8 rank, u32 dims..., f32 values
//! u8 has_optimizer
//! if 1: u64 step, then per param in the same order: f32 first-moment
//!       values, f32 second-moment values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::DenoiserConfig;
use crate::schedule::{DiffusionSchedule, SamplerMode};
use crate::tensor::{ParamStore, Real, Tensor};
use crate::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MSDNZ01";

/// Structured-text portion of a checkpoint.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub beta_min: Real,
    pub beta_max: Real,
    pub fps: Real,
    #[serde(default)]
    pub sampler_mode: SamplerMode,
    #[serde(default)]
    pub train: Option<TrainState>,
}

/// Where a training run stands, for exact resume.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub next_step: u64,
}

/// Adam moment buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerBlobs {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerBlobs>,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.header.config.timesteps, self.header.beta_min, self.header.beta_max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = toml::to_string(&self.header)
            .map_err(|e| CoreError::Checkpoint(format!("header serialization: {e}")))?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_blob(&mut buf, name, t)?;
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                buf.extend_from_slice(&opt.step.to_le_bytes());
                for (name, t) in self.params.iter() {
                    let m = opt.first.get(name).ok_or_else(|| {
                        CoreError::Checkpoint(format!("missing first moment for {name}"))
                    })?;
                    let v = opt.second.get(name).ok_or_else(|| {
                        CoreError::Checkpoint(format!("missing second moment for {name}"))
                    })?;
                    write_values(&mut buf, t, m)?;
                    write_values(&mut buf, t, v)?;
                }
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(CoreError::Checkpoint("unexpected end of file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 7)? != CHECKPOINT_MAGIC {
            return Err(CoreError::Checkpoint(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            )));
        }
        let header_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header_text = String::from_utf8(take(&mut pos, header_len)?.to_vec())
            .map_err(|e| CoreError::Checkpoint(format!("header not utf-8: {e}")))?;
        let header: CheckpointHeader = toml::from_str(&header_text)
            .map_err(|e| CoreError::Checkpoint(format!("header parse: {e}")))?;

        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut params = ParamStore::new();
        let mut order: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| CoreError::Checkpoint(format!("name not utf-8: {e}")))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as Real);
            }
            params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            order.push((name, shape));
        }

        let has_opt = take(&mut pos, 1)?[0];
        let optimizer = if has_opt == 1 {
            let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let mut first = BTreeMap::new();
            let mut second = BTreeMap::new();
            for (name, shape) in &order {
                let numel: usize = shape.iter().product();
                for target in [&mut first, &mut second] {
                    let mut data = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        data.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as Real);
                    }
                    target.insert(name.clone(), Tensor::new(shape.clone(), data)?);
                }
            }
            Some(OptimizerBlobs { step, first, second })
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(CoreError::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { header, params, optimizer })
    }
}

fn write_blob(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let nb = name.as_bytes();
    if nb.len() > u16::MAX as usize {
        return Err(CoreError::Checkpoint(format!("parameter name too long: {name}")));
    }
    buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
    buf.extend_from_slice(nb);
    buf.push(t.shape().len() as u8);
    for d in t.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(())
}

fn write_values(buf: &mut Vec<u8>, reference: &Tensor, t: &Tensor) -> Result<()> {
    if t.shape() != reference.shape() {
        return Err(CoreError::Checkpoint("moment shape mismatch".into()));
    }
    for v in t.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(())
}
