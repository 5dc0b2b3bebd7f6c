//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "FTRL1" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | rank u32 | dims u32×rank | data f32×numel )
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{EncoderConfig, Model};
use crate::nn::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"FTRL1";
pub const VERSION: u32 = 1;
pub const ENCODER_META: &str = "meta.encoder";

/// Named tensors with values held at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((
            name.into(),
            t.shape().to_vec(),
            t.data().iter().map(|&v| v as f32).collect(),
        ));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, shape, data)| {
            Tensor::new(shape.clone(), data.iter().map(|&v| f64::from(v)).collect())
                .expect("validated on construction")
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(r.corrupt(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(MAGIC.len(), format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.corrupt(at + 4, "tensor name is not UTF-8".into()))?
                .to_string();
            let rank_at = r.pos;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if rank == 0 || shape.contains(&0) {
                return Err(r.corrupt(rank_at, format!("tensor `{name}` has degenerate shape {shape:?}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| r.corrupt(rank_at, format!("tensor `{name}` shape {shape:?} overflows")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            tensors.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Encoder configuration metadata followed by every model tensor.
    pub fn from_model(model: &Model) -> Self {
        let mut ck = Checkpoint::new();
        let meta: Vec<f64> = model.encoder_config().to_meta().iter().map(|&v| f64::from(v)).collect();
        ck.push(ENCODER_META, &Tensor::vector(meta));
        for (name, t) in model.state() {
            ck.push(name, t);
        }
        ck
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let meta = self
            .get(ENCODER_META)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks `{ENCODER_META}`")))?;
        let ints: Vec<u32> = meta.data().iter().map(|&v| v as u32).collect();
        EncoderConfig::from_meta(&ints)
    }

    /// Copies every parameter and buffer of `net` from the checkpoint.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        for (name, t) in net.state_mut() {
            let saved = self
                .get(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint has no tensor `{name}`")))?;
            if saved.shape() != t.shape() {
                return Err(Error::shape("checkpoint restore", t.shape(), saved.shape()));
            }
            *t = saved;
        }
        Ok(())
    }

    /// Rebuilds the encoder stored in the checkpoint.
    pub fn load_encoder(&self) -> Result<Network> {
        let cfg = self.encoder_config()?;
        // the initial values are overwritten below
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut enc = crate::models::build_encoder(&cfg, &mut rng)?;
        self.restore(&mut enc)?;
        Ok(enc)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint::new()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                path: self.path.clone(),
                offset: self.bytes.len() as u64,
                expected: (n - left) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn corrupt(&self, offset: usize, reason: String) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            offset: offset as u64,
            reason,
        }
    }
}
