//! Named parameter storage and the little-endian float32 tensor file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered map from dotted parameter names to matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        let (idx, prev) = self.entries.insert_full(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        ParamId(idx)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(n, _)| n.as_str()).expect("valid id")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars across parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Overwrites values of every parameter present in `other` by name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in &other.entries {
            let slot = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if slot.dim() != value.dim() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected {:?}, found {:?}",
                    slot.dim(),
                    value.dim()
                )));
            }
            slot.assign(value);
        }
        Ok(())
    }
}

/// Seeded initialisers.
pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in floats from the start of the binary file.
    pub offset: usize,
}

/// Writes every parameter as row-major little-endian `f32` into `path`.
pub fn write_tensors(path: &Path, store: &ParamStore) -> Result<Vec<TensorEntry>> {
    let mut buf = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, value) in store.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: [value.nrows(), value.ncols()],
            offset,
        });
        for x in value.iter() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        offset += value.len();
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(entries)
}

pub fn read_tensors(path: &Path, entries: &[TensorEntry]) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let floats = read_f32_le(&bytes)?;
    let mut store = ParamStore::new();
    for e in entries {
        let n = e.shape[0] * e.shape[1];
        let slice = floats.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::Format(format!("tensor `{}` runs past the end of {}", e.name, path.display()))
        })?;
        let values = slice.iter().map(|&x| x as f64).collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), values)
            .map_err(|err| Error::Shape(err.to_string()))?;
        store.insert(e.name.clone(), arr);
    }
    Ok(store)
}

pub fn read_f32_le(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_file_round_trip_is_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("a.weight", normal(&mut rng, 3, 4, 1.0).mapv(|x| x as f32 as f64));
        store.insert("b", normal(&mut rng, 1, 2, 1.0).mapv(|x| x as f32 as f64));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let entries = write_tensors(&path, &store).unwrap();
        assert_eq!(entries[1].offset, 12);
        let back = read_tensors(&path, &entries).unwrap();
        assert_eq!(back, store);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 14 * 4);
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut a = ParamStore::new();
        a.insert("x", Array2::zeros((2, 2)));
        let mut b = ParamStore::new();
        b.insert("x", Array2::zeros((1, 2)));
        assert!(matches!(a.load_from(&b), Err(Error::Shape(_))));
        let mut c = ParamStore::new();
        c.insert("y", Array2::zeros((2, 2)));
        assert!(matches!(a.load_from(&c), Err(Error::Format(_))));
    }
}
