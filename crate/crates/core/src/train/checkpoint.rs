use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use crate::error::{FrnError, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"FRNW";
const VERSION: u32 = 1;
pub const ADAM_M_PREFIX: &str = "adam.m/";
pub const ADAM_V_PREFIX: &str = "adam.v/";

/// Named tensors plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Settings needed to rebuild a trainer, stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Band count of the data the model was trained on.
    pub data_bands: usize,
    pub step: u64,
}

pub fn meta_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    for (name, t) in &ck.tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| FrnError::Contract(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| FrnError::contract("tensor rank above 255"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| FrnError::contract("tensor dimension above u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.at.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            _ => Err(FrnError::Truncated {
                path: self.path.to_path_buf(),
                expected: self.at as u64 + n as u64,
                found: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FrnError::BadMagic {
            path: path.to_path_buf(),
            expected: "FRNW",
        });
    }
    let mut r = Reader { bytes, at: 4, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(FrnError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let mut tensors = Vec::new();
    while r.at < bytes.len() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| FrnError::Malformed {
                path: path.to_path_buf(),
                reason: format!("parameter name: {e}"),
            })?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(u64::from)).collect::<Result<Vec<u64>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len() as u64))
            .ok_or_else(|| FrnError::DimensionOverflow {
                path: path.to_path_buf(),
                dims: dims.clone(),
            })?;
        let data: Vec<f32> = r
            .take(count as usize * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { step, tensors })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint, meta: Option<&CheckpointMeta>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| FrnError::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| FrnError::io(path, e))?;
    if let Some(meta) = meta {
        let mp = meta_path(path);
        fs::write(&mp, serde_json::to_string_pretty(meta)?).map_err(|e| FrnError::io(&mp, e))?;
    }
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FrnError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn read_meta(weights: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let mp = meta_path(weights.as_ref());
    let text = fs::read_to_string(&mp).map_err(|e| FrnError::io(&mp, e))?;
    Ok(serde_json::from_str(&text)?)
}
