//! `OFAT` named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OFAT" | version u32 | meta_len u32 | meta (UTF-8 JSON) | count u64 |
//!   count x ( name_len u16 | name | rank u8 | extents u64 x rank | f32 x numel )
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::supernet::params::ParamSet;
use crate::supernet::space::{SearchSpace, SubnetConfig};

pub const MAGIC: &[u8; 4] = b"OFAT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Supernet,
    Teacher,
    Subnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: Role,
    pub space: SearchSpace,
    /// Fixed architecture for teachers and extracted subnets.
    #[serde(default)]
    pub subnet: Option<SubnetConfig>,
    #[serde(default)]
    pub stage: Option<u8>,
    pub seed: u64,
    #[serde(default)]
    pub config_digest: Option<String>,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Raw metadata text, kept verbatim so files round-trip byte for byte.
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: &CheckpointMeta, params: &ParamSet) -> Result<Self> {
        let metadata = serde_json::to_string_pretty(meta)
            .map_err(|e| Error::Format(format!("metadata encoding: {e}")))?;
        Ok(Self {
            metadata,
            tensors: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        })
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        serde_json::from_str(&self.metadata)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))
    }

    pub fn params(&self) -> ParamSet {
        self.tensors.iter().cloned().collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = self.metadata.as_bytes();
        let meta_len = u32::try_from(meta.len())
            .map_err(|_| Error::Format("metadata longer than 4 GiB".into()))?;
        w.write_all(&meta_len.to_le_bytes())?;
        w.write_all(meta)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let nl = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            w.write_all(&nl.to_le_bytes())?;
            w.write_all(nb)?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank of {name} exceeds 255")))?;
            w.write_all(&[rank])?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "not an OFAT checkpoint (magic {magic:?})"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let metadata =
            String::from_utf8(meta).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = read_u64(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut nl = [0u8; 2];
            read_exact(r, &mut nl)?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            read_exact(r, &mut raw)?;
            let data: Vec<Real> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let ck = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                cur.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
