use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, NnError};

pub const MANIFEST_FILE: &str = "params.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "sentinel-params";

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    tensors: BTreeMap<String, Matrix>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

impl Parameters {
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
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

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Glorot-uniform weight matrix.
    pub fn add_dense(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Matrix::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit));
        self.insert(name, w);
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros((rows, cols)));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Rounds every entry to the nearest `f32`, matching what a save/load
    /// cycle produces.
    pub fn round_to_f32(&mut self) {
        for m in self.tensors.values_mut() {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Writes `params.json` (names, shapes, byte offsets) and `params.bin`
    /// (row-major little-endian `f32`, tensors in name order) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::with_capacity(self.scalar_count() * 4);
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
                offset: blob.len(),
            });
            for v in m.iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: 1,
            dtype: "f32-le".into(),
            tensors: entries,
        };
        std::fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        let mut f = std::fs::File::create(dir.join(BLOB_FILE))?;
        f.write_all(&blob)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NnError> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT || manifest.version != 1 || manifest.dtype != "f32-le" {
            return Err(NnError::Format(format!(
                "unsupported parameter file {} v{} {}",
                manifest.format, manifest.version, manifest.dtype
            )));
        }
        let mut blob = Vec::new();
        std::fs::File::open(dir.join(BLOB_FILE))?.read_to_end(&mut blob)?;
        let mut params = Parameters::default();
        for e in manifest.tensors {
            let [rows, cols] = e.shape;
            let end = e.offset + rows * cols * 4;
            let bytes = blob
                .get(e.offset..end)
                .ok_or_else(|| NnError::Format(format!("tensor {} past end of blob", e.name)))?;
            let values: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Matrix::from_shape_vec((rows, cols), values)
                .map_err(|err| NnError::Format(err.to_string()))?;
            params.insert(e.name, m);
        }
        if !params.all_finite() {
            return Err(NnError::Format("non-finite parameter".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Parameters::default();
        p.add_dense("w", 10, 6, &mut rng);
        p.add_zeros("b", 1, 6);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(p.get("w").unwrap().iter().all(|v| v.abs() <= limit));
        assert!(p.get("b").unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn save_load_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Parameters::default();
        p.add_dense("layer.w", 3, 5, &mut rng);
        p.add_dense("a", 1, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let loaded = Parameters::load(dir.path()).unwrap();
        p.round_to_f32();
        assert_eq!(loaded, p);
        let blob = std::fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(blob.len(), (15 + 4) * 4);
        // "a" sorts first, so its first entry opens the blob.
        let first = f32::from_le_bytes([blob[0], blob[1], blob[2], blob[3]]);
        assert_eq!(first as f64, p.get("a").unwrap()[[0, 0]]);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut p = Parameters::default();
        p.add_zeros("b", 2, 2);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        std::fs::write(dir.path().join(BLOB_FILE), [0u8; 8]).unwrap();
        assert!(matches!(Parameters::load(dir.path()), Err(NnError::Format(_))));
    }
}
