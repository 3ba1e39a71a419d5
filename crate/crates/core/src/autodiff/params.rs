//! Named parameter storage and the `HGRP` checkpoint format.
//!
//! A checkpoint is two files: a JSON manifest listing every parameter with
//! its shape and byte offset, and a binary blob starting with the magic
//! `HGRP`, a format version byte and a byte holding the width of one real,
//! followed by the little-endian values of all parameters back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::AutodiffError;

pub const PARAM_MAGIC: &[u8; 4] = b"HGRP";
pub const PARAM_FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    seed: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
    ) -> Result<(), AutodiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Overwrites the values of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), AutodiffError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_param",
                shapes: vec![slot.shape().to_vec(), value.shape().to_vec()],
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            seed: self.seed,
        }
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), AutodiffError> {
        let (manifest, blob) = self.encode();
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
        fs::write(dir.join(format!("{stem}.bin")), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, AutodiffError> {
        let json = fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let manifest: ParamManifest = serde_json::from_str(&json)
            .map_err(|e| AutodiffError::Checkpoint(format!("manifest: {e}")))?;
        let blob = fs::read(dir.join(format!("{stem}.bin")))?;
        Self::decode(&manifest, &blob)
    }

    pub fn encode(&self) -> (ParamManifest, Vec<u8>) {
        let mut blob = Vec::with_capacity(HEADER_LEN + self.num_values() * T::BYTES);
        blob.extend_from_slice(PARAM_MAGIC);
        blob.push(PARAM_FORMAT_VERSION);
        blob.push(T::BYTES as u8);
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for &x in t.data() {
                x.write_le(&mut blob);
            }
        }
        let manifest = ParamManifest {
            format: "HGRP".to_string(),
            version: PARAM_FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            seed: self.seed,
            entries,
        };
        (manifest, blob)
    }

    pub fn decode(manifest: &ParamManifest, blob: &[u8]) -> Result<Self, AutodiffError> {
        let corrupt = |msg: String| AutodiffError::Checkpoint(msg);
        if blob.len() < HEADER_LEN || &blob[..4] != PARAM_MAGIC {
            return Err(corrupt("bad magic, expected HGRP".into()));
        }
        if blob[4] != PARAM_FORMAT_VERSION || manifest.version != PARAM_FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", blob[4])));
        }
        if blob[5] as usize != T::BYTES || manifest.dtype != T::DTYPE {
            return Err(corrupt(format!(
                "stored reals are {} bytes ({}), expected {}",
                blob[5],
                manifest.dtype,
                T::DTYPE
            )));
        }
        let mut store = ParameterStore::new(manifest.seed);
        for e in &manifest.entries {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * T::BYTES;
            if e.offset < HEADER_LEN || end > blob.len() {
                return Err(corrupt(format!(
                    "truncated blob: `{}` needs bytes {}..{end}, file has {}",
                    e.name,
                    e.offset,
                    blob.len()
                )));
            }
            let data = blob[e.offset..end]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data))?;
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format: String,
    pub version: u8,
    pub dtype: String,
    pub seed: u64,
    pub entries: Vec<ParamEntry>,
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> ParameterStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParameterStore::new(3);
        s.insert("b.w", uniform_init(&mut rng, vec![3, 4], 3))
            .unwrap();
        s.insert("a.v", uniform_init(&mut rng, vec![5], 5)).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(matches!(
            s.insert("a.v", Tensor::zeros(vec![1])),
            Err(AutodiffError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn init_within_bounds() {
        let s = sample();
        let bound = 1.0 / 3f32.sqrt();
        assert!(s
            .get("b.w")
            .unwrap()
            .data()
            .iter()
            .all(|x| x.abs() <= bound));
    }

    #[test]
    fn encode_decode_bit_exact() {
        let s = sample();
        let (m, blob) = s.encode();
        assert_eq!(&blob[..4], b"HGRP");
        assert_eq!(blob[4], PARAM_FORMAT_VERSION);
        let back = ParameterStore::<f32>::decode(&m, &blob).unwrap();
        assert_eq!(back, s);
        let (m2, blob2) = back.encode();
        assert_eq!((m2, blob2), (m, blob));
    }

    #[test]
    fn truncated_blob_is_structured_error() {
        let s = sample();
        let (m, blob) = s.encode();
        let err = ParameterStore::<f32>::decode(&m, &blob[..blob.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_and_dtype() {
        let s = sample();
        let (m, mut blob) = s.encode();
        assert!(ParameterStore::<f64>::decode(&m, &blob).is_err());
        blob[0] = b'X';
        assert!(ParameterStore::<f32>::decode(&m, &blob)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }
}
