//! Versioned binary checkpoints.
//!
//! Layout: `MTCK`, u32 version, u64 header length, JSON header, u64 blob
//! count, then blobs of (u32 name length, name, u32 ndim, u64 dims...,
//! f32 little-endian data). Optimizer moments are stored as blobs named
//! `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ScheduleConfig;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::TextEncoder;
use crate::train::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: DenoiserConfig,
    pub text_encoder: TextEncoder,
    /// Last completed training stage (0 for an untrained model).
    pub stage: u8,
    pub iteration: usize,
    pub train: Option<TrainConfig>,
    /// Per-parameter optimizer step counts, keyed by parameter name.
    pub adam_steps: Option<BTreeMap<String, u64>>,
    /// Noise schedule the model was trained with; `None` means the default.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: Option<AdamState>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().expect("4 bytes")))
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().expect("8 bytes")))
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_blob(bytes: &mut &[u8]) -> Result<(String, Tensor<f32>)> {
    let len = take_u32(bytes, "blob name length")? as usize;
    let name = String::from_utf8(take(bytes, len, "blob name")?.to_vec())
        .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
    let ndim = take_u32(bytes, "blob rank")? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("blob `{name}` has rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(take_u64(bytes, "blob dims")? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()));
    let n = n.ok_or_else(|| Error::Checkpoint(format!("blob `{name}` data truncated")))?;
    let raw = take(bytes, n * 4, "blob data")?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((name, Tensor::from_vec(&shape, data)?))
}

impl Checkpoint {
    /// Snapshot of `store` (values only; trainability is not persisted).
    pub fn from_store(model: &Denoiser, store: &ParamStore<f32>, stage: u8, iteration: usize) -> Self {
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self {
            header: CheckpointHeader {
                model: model.config().clone(),
                text_encoder: model.text_encoder().clone(),
                stage,
                iteration,
                train: None,
                adam_steps: None,
                schedule: None,
            },
            params,
            adam: None,
        }
    }

    /// Schedule to sample with.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.header.schedule.clone().unwrap_or_default().build()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.adam_steps = self.adam.as_ref().map(|a| a.steps.clone());
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut blobs: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(a) = &self.adam {
            blobs.extend(a.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            blobs.extend(a.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
        for (name, t) in blobs {
            put_blob(&mut out, &name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        if take(&mut rest, 4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = take_u32(&mut rest, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = take_u64(&mut rest, "header length")? as usize;
        let mut header: CheckpointHeader = serde_json::from_slice(take(&mut rest, hlen, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = take_u64(&mut rest, "blob count")?;
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let (name, t) = take_blob(&mut rest)?;
            if let Some(n) = name.strip_prefix(ADAM_M) {
                m.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.push((n.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        let adam = match header.adam_steps.take() {
            Some(steps) => Some(AdamState { m, v, steps }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer moments without step counts".into())),
        };
        Ok(Self { header, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }

    /// Rebuilds the network and loads every parameter. The file must carry
    /// exactly the parameters the configuration defines, with equal shapes.
    pub fn instantiate(&self) -> Result<(Denoiser, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Denoiser::with_text_encoder(
            self.header.model.clone(),
            self.header.text_encoder.clone(),
            &mut store,
            &mut rng,
        )?;
        let present: std::collections::HashSet<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        if let Some((_, p)) = store.iter().find(|(_, p)| !present.contains(p.name.as_str())) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", p.name)));
        }
        store.load_values(&self.params)?;
        Ok((model, store))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
