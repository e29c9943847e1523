//! `kmtw` checkpoint files.
//!
//! Layout, little-endian: magic `KMTW`, `u16` version, `u32` length of a
//! JSON config block (encoder config and normalizer), the block itself,
//! `u32` tensor count, then per tensor `u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims and `f64` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Encoder, EncoderConfig, ParamStore};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KMTW";
const VERSION: u16 = 1;

/// A trained encoder together with the normalizer its inputs assume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub normalizer: Normalizer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    encoder: EncoderConfig,
    normalizer: Normalizer,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let block = serde_json::to_vec(&ConfigBlock {
            encoder: self.encoder.config.clone(),
            normalizer: self.normalizer.clone(),
        })
        .expect("config serializes");
        let mut out = Vec::with_capacity(16 + block.len() + self.encoder.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(&block);
        out.extend_from_slice(&(self.encoder.params.len() as u32).to_le_bytes());
        for (name, t) in self.encoder.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected KMTW".into(),
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {}", version),
            });
        }
        if bytes.len() < 10 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: "truncated checkpoint".into(),
            });
        }
        let body = bytes.len() - 4;
        if crc32fast::hash(&bytes[..body]) != u32::from_le_bytes(bytes[body..].try_into().unwrap()) {
            return Err(Error::Format {
                offset: body as u64,
                msg: "checksum mismatch".into(),
            });
        }
        let bytes = &bytes[..body];
        r.bytes = bytes;
        let len = r.u32()? as usize;
        let at = r.pos;
        let block: ConfigBlock = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
            offset: at as u64,
            msg: format!("bad config block: {}", e),
        })?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            if params.get(&name).is_some() {
                return Err(Error::Format {
                    offset: at as u64,
                    msg: format!("duplicate parameter {}", name),
                });
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format {
                    offset: at as u64,
                    msg: format!("parameter {} has an overflowing shape", name),
                })?;
            let payload = r.take(numel.checked_mul(8).unwrap_or(usize::MAX))?;
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::from_parts(shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after last tensor".into(),
            });
        }
        let encoder = Encoder::from_params(block.encoder, params)?;
        Ok(Checkpoint {
            encoder,
            normalizer: block.normalizer,
        })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated: needed {} bytes at offset {}", n, self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { .. } => e,
        other => Error::Load {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
