//! Named parameter tensors and the on-disk checkpoint format: a blob of
//! little-endian `f32` values plus a JSON sidecar describing the layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "songgraph-params/1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index(name);
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index(name);
        &mut self.tensors[i]
    }

    pub fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> ParamSet {
        assert_eq!(tensors.len(), self.tensors.len());
        ParamSet {
            names: self.names.clone(),
            tensors,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Sets every value to zero.
    pub fn zeroed(&self) -> ParamSet {
        self.with_tensors(
            self.tensors
                .iter()
                .map(|t| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]))
                .collect(),
        )
    }

    /// Blob and sidecar for this parameter set.
    pub fn encode(&self, kind: &str, meta: serde_json::Value) -> (Vec<u8>, Sidecar) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0usize;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let sidecar = Sidecar {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            tensors: entries,
            meta,
        };
        (blob, sidecar)
    }

    pub fn decode(blob: &[u8], sidecar: &Sidecar) -> Result<ParamSet> {
        if sidecar.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", sidecar.format)));
        }
        if blob.len() % 4 != 0 {
            return Err(Error::Checkpoint("blob length is not a multiple of 4".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut set = ParamSet::new();
        for entry in &sidecar.tensors {
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + len;
            if end > values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` runs past the end of the blob",
                    entry.name
                )));
            }
            set.push(
                entry.name.clone(),
                Tensor::new(entry.shape.clone(), values[entry.offset..end].to_vec()),
            );
        }
        Ok(set)
    }

    /// Writes `<path>` (blob) and `<path>.json` (sidecar).
    pub fn save(&self, path: &Path, kind: &str, meta: serde_json::Value) -> Result<()> {
        let (blob, sidecar) = self.encode(kind, meta);
        fs::write(path, blob)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamSet, Sidecar)> {
        let blob = fs::read(path)?;
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let set = ParamSet::decode(&blob, &sidecar)?;
        Ok((set, sidecar))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

impl Sidecar {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }
}
