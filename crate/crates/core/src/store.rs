//! Named tensor collections stored as a directory of tensor files plus a
//! `manifest.json` mapping layer names to file names.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{BatchNormSpec, ConvSpec};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    layers: BTreeMap<String, String>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct TensorStore {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("weight store has no layer `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert_conv(&mut self, prefix: &str, conv: &ConvSpec) {
        self.insert(format!("{prefix}.weight"), conv.weights.clone());
        if let Some(b) = &conv.bias {
            self.insert(format!("{prefix}.bias"), b.clone());
        }
    }

    /// Reads back a conv written by [`insert_conv`](Self::insert_conv).
    pub fn conv(&self, prefix: &str, stride: usize) -> Result<ConvSpec> {
        let w = self.get(&format!("{prefix}.weight"))?.clone();
        let bias = self.tensors.get(&format!("{prefix}.bias")).cloned();
        let (_, _, kh, kw) = w.dims4()?;
        ConvSpec::new(w, bias, (stride, stride), (kh / 2, kw / 2))
    }

    pub fn insert_bn(&mut self, prefix: &str, bn: &BatchNormSpec) {
        self.insert(format!("{prefix}.mean"), bn.mean.clone());
        self.insert(format!("{prefix}.var"), bn.var.clone());
        self.insert(format!("{prefix}.gamma"), bn.gamma.clone());
        self.insert(format!("{prefix}.beta"), bn.beta.clone());
        self.insert(format!("{prefix}.eps"), Tensor::vector(vec![bn.eps]).expect("rank-1"));
    }

    pub fn bn(&self, prefix: &str) -> Result<BatchNormSpec> {
        let eps = self.get(&format!("{prefix}.eps"))?.data()[0];
        BatchNormSpec::new(
            self.get(&format!("{prefix}.mean"))?.clone(),
            self.get(&format!("{prefix}.var"))?.clone(),
            self.get(&format!("{prefix}.gamma"))?.clone(),
            self.get(&format!("{prefix}.beta"))?.clone(),
            eps,
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut layers = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{}.bevt", name.replace(['/', '\\'], "_"));
            t.save(dir.join(&file))?;
            layers.insert(name.clone(), file);
        }
        let manifest = Manifest { version: 1, layers };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != 1 {
            return Err(Error::Format(format!(
                "unsupported weight manifest version {}",
                manifest.version
            )));
        }
        let mut store = Self::new();
        for (name, file) in manifest.layers {
            store.insert(name, Tensor::load(dir.join(file))?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::new();
        let conv = ConvSpec::same(Tensor::full(&[2, 1, 3, 3], 0.5).unwrap(), Some(Tensor::zeros(&[2]).unwrap())).unwrap();
        s.insert_conv("trunk.0", &conv);
        s.insert_bn("trunk.bn", &BatchNormSpec::identity(2).unwrap());
        s.save(dir.path()).unwrap();
        let back = TensorStore::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.conv("trunk.0", 1).unwrap(), conv);
        assert!(back.get("missing").is_err());
    }
}
