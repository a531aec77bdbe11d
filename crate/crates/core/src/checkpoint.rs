//! The `ATCK` tensor container.
//!
//! ```text
//! "ATCK" | version u32 = 1 | config digest [32]
//! | count u32 | count × (name_len u32, name, dtype u8, rank u32, dims u64…, offset u64)
//! | payload
//! ```
//!
//! All integers and floats are little-endian. Offsets are relative to the
//! payload start. The config text itself travels as the `u8` tensor
//! `__config__` and free-form metadata as `__meta__`; loading recomputes the
//! digest from the stored text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::parse_lines;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::util::sha256;

pub const MAGIC: &[u8; 4] = b"ATCK";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const CONFIG_KEY: &str = "__config__";
const META_KEY: &str = "__meta__";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical config text the digest is taken over.
    pub config_text: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config_text: String) -> Self {
        Self {
            config_text,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        sha256(self.config_text.as_bytes())
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta_text: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        if self
            .meta
            .iter()
            .any(|(k, v)| k.contains(['=', '\n']) || v.contains('\n'))
        {
            return Err(Error::Checkpoint(
                "meta keys and values must be single-line without '='".into(),
            ));
        }
        let mut entries: Vec<(&str, u8, Vec<u64>, Vec<u8>)> = Vec::new();
        for (key, text) in [(CONFIG_KEY, &self.config_text), (META_KEY, &meta_text)] {
            entries.push((
                key,
                DTYPE_U8,
                vec![text.len() as u64],
                text.as_bytes().to_vec(),
            ));
        }
        for (name, t) in &self.tensors {
            if name.starts_with("__") {
                return Err(Error::Checkpoint(format!("reserved tensor name {name:?}")));
            }
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            entries.push((
                name,
                DTYPE_F32,
                t.dims().iter().map(|&d| d as u64).collect(),
                bytes,
            ));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, dtype, dims, bytes) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*dtype);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, _, _, bytes) in entries {
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, dtype, dims, offset));
        }
        let payload = &bytes[r.pos..];
        let mut config_text = None;
        let mut meta_text = None;
        let mut tensors = BTreeMap::new();
        for (name, dtype, dims, offset) in table {
            let n: usize = dims.iter().product();
            let width = match dtype {
                DTYPE_F32 => 4,
                DTYPE_U8 => 1,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: unknown dtype tag {other}"
                    )))
                }
            };
            let end = n.checked_mul(width).and_then(|b| b.checked_add(offset));
            let raw = end
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: payload out of range")))?;
            match (dtype, name.as_str()) {
                (DTYPE_U8, CONFIG_KEY) => config_text = Some(utf8(raw)?),
                (DTYPE_U8, META_KEY) => meta_text = Some(utf8(raw)?),
                (DTYPE_F32, _) => {
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    tensors.insert(name.clone(), Tensor::new(dims, data)?);
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: unexpected dtype {dtype}"
                    )))
                }
            }
        }
        let config_text =
            config_text.ok_or_else(|| Error::Checkpoint("missing config text".into()))?;
        let meta = parse_lines(&meta_text.unwrap_or_default())?
            .into_iter()
            .collect();
        let ck = Checkpoint {
            config_text,
            meta,
            tensors,
        };
        if ck.digest() != digest {
            return Err(Error::DigestMismatch {
                expected: hex::encode(digest),
                found: ck.digest_hex(),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn utf8(raw: &[u8]) -> Result<String> {
    String::from_utf8(raw.to_vec())
        .map_err(|_| Error::Checkpoint("text tensor is not utf-8".into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
