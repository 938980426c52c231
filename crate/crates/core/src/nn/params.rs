use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Main,
    Paralinguistic,
    Backbone,
    Head,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamGroup {
    fn code(self) -> u8 {
        match self {
            ParamGroup::Main => 0,
            ParamGroup::Paralinguistic => 1,
            ParamGroup::Backbone => 2,
            ParamGroup::Head => 3,
            ParamGroup::Buffer => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ParamGroup::Main,
            1 => ParamGroup::Paralinguistic,
            2 => ParamGroup::Backbone,
            3 => ParamGroup::Head,
            4 => ParamGroup::Buffer,
            _ => return Err(Error::Format(format!("unknown parameter group code {c}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named parameters with their groups. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.entries[id.0].group = group;
    }

    /// Total element count of trainable parameters.
    pub fn n_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group != ParamGroup::Buffer)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copies values for every name present in both stores with matching shape.
    /// Returns the names that were loaded.
    pub fn load_matching(&mut self, other: &ParamStore, prefix: &str) -> Vec<String> {
        let mut loaded = Vec::new();
        for e in &other.entries {
            let name = format!("{prefix}{}", e.name);
            if let Some(&i) = self.index.get(&name) {
                if self.entries[i].value.shape() == e.value.shape() {
                    self.entries[i].value = e.value.clone();
                    loaded.push(name);
                }
            }
        }
        loaded
    }

    /// Binary checkpoint: magic, version, entry count, then per entry the name,
    /// group code, shape and little-endian `f64` values, followed by a JSON
    /// metadata blob.
    pub fn to_bytes(&self, meta: &serde_json::Value) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.group.code());
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let group = ParamGroup::from_code(r.take(1)?[0])?;
            let nd = r.u32()? as usize;
            let shape: Vec<usize> = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.index.contains_key(&name) {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            store.add(name, group, Tensor::new(shape, data)?);
        }
        let len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(len)?)?;
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        write_atomic(path, &self.to_bytes(meta))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Uniform Xavier: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).unwrap()
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is fewer),
/// from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(short);
    while q.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = if rows <= cols { q[r][c] } else { q[c][r] };
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.add("enc.w", ParamGroup::Main, Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]).unwrap());
        s.add("par.b", ParamGroup::Paralinguistic, Tensor::scalar(0.25));
        let meta = serde_json::json!({"iteration": 7});
        let (back, m) = ParamStore::from_bytes(&s.to_bytes(&meta)).unwrap();
        assert_eq!(back, s);
        assert_eq!(m, meta);
        let mut bytes = s.to_bytes(&meta);
        bytes.truncate(bytes.len() - 3);
        assert!(ParamStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal(&mut rng, 6, 4);
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..6).map(|r| q.data()[r * 4 + i] * q.data()[r * 4 + j]).sum();
                assert!((d - f64::from(i == j)).abs() < 1e-10);
            }
        }
    }
}
