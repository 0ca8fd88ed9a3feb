//! Named parameter storage and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "PCCFORGE-CKPT-v1\n"
//! u32 metadata count, then per entry: u32 len + utf8 key, u32 len + utf8 value
//! u32 array count, then per array:
//!     u32 len + utf8 name
//!     u32 rank, rank x u64 dims
//!     product(dims) x f64
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"PCCFORGE-CKPT-v1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named tensors with deterministic (lexicographic) iteration order, plus
/// free-form string metadata carried into checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Panics if absent; architectures validate their names up front.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    /// Checks that `name` exists with exactly `shape`.
    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        match self.tensors.get(name) {
            None => Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            Some(t) if t.shape != shape => Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            ))),
            Some(_) => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes, all zeros, no metadata.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += alpha * other` over the names both stores share.
    pub fn add_scaled(&mut self, other: &ParamStore, alpha: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(name) {
                for (a, b) in t.data.iter_mut().zip(&o.data) {
                    *a += alpha * b;
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Moves every tensor of `other` in, prefixing names.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (name, t) in other.tensors {
            self.tensors.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.meta.iter()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "bad header, expected PCCFORGE-CKPT-v1".into(),
            ));
        }
        let mut store = ParamStore::new();
        let n_meta = read_u32(r)?;
        for _ in 0..n_meta {
            let k = read_str(r)?;
            let v = read_str(r)?;
            store.meta.insert(k, v);
        }
        let n = read_u32(r)?;
        for _ in 0..n {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let count: usize = shape.iter().product();
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.tensors.insert(name, Tensor { shape, data });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("truncated checkpoint".into())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("non-utf8 name".into()))
}
