//! Synthetic 1-D signals and the `OFAD` dataset file.
//!
//! Layout, little-endian: `"OFAD" | version u32 | n u64 | n x (len u64 | f32 x len)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::numerics::{rng::streams, Real, Rng};
use crate::supernet::checkpoint::{read_u32, read_u64};

pub const MAGIC: &[u8; 4] = b"OFAD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Vec<Real>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sequences.len() as u64).to_le_bytes())?;
        for s in &self.sequences {
            w.write_all(&(s.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(s.len() * 4);
            for &v in s {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated dataset header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "not an OFAD dataset (magic {magic:?})"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}, expected {VERSION}"
            )));
        }
        let n = read_u64(r)?;
        let mut sequences = Vec::new();
        for _ in 0..n {
            let len = read_u64(r)? as usize;
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Format("truncated dataset payload".into()))?;
            sequences.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                    .collect(),
            );
        }
        Ok(Self { sequences })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let ds = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after dataset",
                cur.len()
            )));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fail unless there is at least one non-empty sequence in every slot.
    pub fn require_usable(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(config_err(format!("{what} dataset has no sequences")));
        }
        if self.sequences.iter().any(|s| s.is_empty()) {
            return Err(config_err(format!(
                "{what} dataset holds an empty sequence"
            )));
        }
        Ok(())
    }
}

/// `n` signals of `length` samples in `[-1, 1]`.
///
/// Each signal is a run of segments of `length/4` to `length` samples,
/// imitating phone-like stationary stretches. A segment is a mixture of one to
/// three sinusoids with its own frequencies, phases and amplitudes; a little
/// Gaussian noise is added everywhere.
pub fn make_synthetic_dataset(seed: u64, n: usize, length: usize) -> Result<Dataset> {
    if n == 0 || length == 0 {
        return Err(config_err(format!(
            "synthetic dataset needs n >= 1 and length >= 1, got n={n}, length={length}"
        )));
    }
    let mut rng = Rng::new(seed, streams::DATA);
    let min_seg = (length / 4).max(1);
    let max_seg = length.max(min_seg);
    let sequences = (0..n)
        .map(|_| {
            let mut s = Vec::with_capacity(length);
            while s.len() < length {
                let seg = min_seg + rng.below(max_seg - min_seg + 1);
                let parts = 1 + rng.below(3);
                let comps: Vec<(f64, f64, f64)> = (0..parts)
                    .map(|_| {
                        (
                            rng.uniform_range(0.01, 0.2) * std::f64::consts::TAU,
                            rng.uniform_range(0.0, std::f64::consts::TAU),
                            rng.uniform_range(0.1, 0.85 / parts as f64),
                        )
                    })
                    .collect();
                for i in 0..seg.min(length - s.len()) {
                    let mut v: f64 = comps
                        .iter()
                        .map(|&(w, ph, a)| a * (w * i as f64 + ph).sin())
                        .sum();
                    v += 0.05 * rng.normal();
                    s.push(v.clamp(-1.0, 1.0) as Real);
                }
            }
            s
        })
        .collect();
    Ok(Dataset { sequences })
}

/// Train and validation sets cut from one seeded draw of `n_train + n_val` signals.
pub fn make_split(
    seed: u64,
    n_train: usize,
    n_val: usize,
    length: usize,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_val == 0 {
        return Err(config_err(
            "train and validation sets both need at least one sequence",
        ));
    }
    let mut all = make_synthetic_dataset(seed, n_train + n_val, length)?;
    let val = all.sequences.split_off(n_train);
    Ok((all, Dataset { sequences: val }))
}
