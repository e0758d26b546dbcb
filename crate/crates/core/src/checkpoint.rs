//! `VCCK` checkpoint files: a JSON config snapshot followed by named tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::encoder::decode_scalars;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::pipeline::VidCompress;
use crate::tensor::{DType, Real, Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let len = u32::try_from(config.len())
            .map_err(|_| Error::Config("config snapshot exceeds 4 GiB".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&config);
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("tensor name `{name}` is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint, converting every record to `T`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, expected \"VCCK\"".into(),
            });
        }
        r.pos = 4;
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let at = r.pos as u64;
        let config = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
            offset: at,
            detail: format!("config snapshot: {e}"),
        })?;

        let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
        while r.pos < bytes.len() {
            let record = r.pos as u64;
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format {
                    offset: record + 2,
                    detail: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(Error::Format {
                    offset: record,
                    detail: format!("duplicate tensor `{name}`"),
                });
            }
            let tag_at = r.pos as u64;
            let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Format {
                offset: tag_at,
                detail: format!("unknown dtype for `{name}`"),
            })?;
            let rank = r.take(1)?[0] as usize;
            if rank > MAX_RANK {
                return Err(Error::Format {
                    offset: tag_at + 1,
                    detail: format!("rank {rank} of `{name}` exceeds {MAX_RANK}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let numel = shape
                .iter()
                .try_fold(1u64, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(dtype.size() as u64))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| Error::Format {
                    offset: tag_at + 2,
                    detail: format!("extents of `{name}` overflow"),
                })?;
            let data = decode_scalars::<T>(r.take(numel)?, dtype);
            let shape: Vec<usize> = shape.into_iter().map(|e| e as usize).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Weights for `config`, rejecting missing, unknown or misshapen tensors.
    pub fn params_for(&self, config: &ModelConfig) -> Result<ModelParams<Tensor<T>>> {
        let map: BTreeMap<String, Tensor<T>> = self.tensors.iter().cloned().collect();
        ModelParams::from_named(config, map)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: self.pos as u64 + n as u64,
                actual: self.bytes.len() as u64,
            }),
        }
    }
}

impl<T: Real> VidCompress<T> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            config: serde_json::to_value(self.config())?,
            tensors: self
                .params()
                .named("")
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        })
    }

    /// Rebuilds a model from the checkpoint's own config snapshot.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        let params = ckpt.params_for(&config)?;
        Self::from_params(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
