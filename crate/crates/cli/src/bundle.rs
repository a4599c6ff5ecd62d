//! Tensor bundles: a directory with a JSON manifest plus one raw
//! little-endian row-major file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U16,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U16(_) => DType::U16,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::U16 => TensorData::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            "shape {shape:?} holds {n} elements but {} were given",
            data.len()
        );
        Ok(Tensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn u16(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Tensor::new(shape, TensorData::U16(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Tensor::new(shape, TensorData::U8(data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub attrs: serde_json::Map<String, serde_json::Value>,
}

/// In-memory bundle; tensors are kept sorted by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub tensors: BTreeMap<String, Tensor>,
    pub attrs: serde_json::Map<String, serde_json::Value>,
}

fn file_name(name: &str) -> String {
    format!("{}.bin", name.replace(['/', '\\'], "_"))
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn set_attr(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.attrs.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn attr<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .attrs
            .get(key)
            .with_context(|| format!("bundle attribute `{key}` is missing"))?;
        serde_json::from_value(v.clone()).with_context(|| format!("bundle attribute `{key}` is malformed"))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .with_context(|| format!("bundle has no tensor `{name}`"))
    }

    /// Tensor data as `f32` with the expected shape.
    pub fn f32(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let t = self.checked(name, shape)?;
        match &t.data {
            TensorData::F32(v) => Ok(v),
            other => bail!("tensor `{name}` has dtype {:?}, expected f32", other.dtype()),
        }
    }

    pub fn u16(&self, name: &str, shape: &[usize]) -> Result<&[u16]> {
        let t = self.checked(name, shape)?;
        match &t.data {
            TensorData::U16(v) => Ok(v),
            other => bail!("tensor `{name}` has dtype {:?}, expected u16", other.dtype()),
        }
    }

    pub fn u8(&self, name: &str, shape: &[usize]) -> Result<&[u8]> {
        let t = self.checked(name, shape)?;
        match &t.data {
            TensorData::U8(v) => Ok(v),
            other => bail!("tensor `{name}` has dtype {:?}, expected u8", other.dtype()),
        }
    }

    fn checked(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        ensure!(t.shape == shape, "tensor `{name}` has shape {:?}, expected {shape:?}", t.shape);
        Ok(t)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = file_name(name);
            fs::write(dir.join(&file), t.data.to_bytes())
                .with_context(|| format!("cannot write tensor `{name}`"))?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            tensors: entries,
            attrs: self.attrs.clone(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("cannot write manifest in {}", dir.display()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))?;
        let mut bundle = TensorBundle {
            tensors: BTreeMap::new(),
            attrs: manifest.attrs,
        };
        for e in manifest.tensors {
            ensure!(
                !e.file.contains(['/', '\\']) && e.file != ".." && !e.file.is_empty(),
                "tensor `{}` points outside the bundle: {}",
                e.name,
                e.file
            );
            let bytes = fs::read(dir.join(&e.file)).with_context(|| format!("cannot read tensor `{}`", e.name))?;
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .context("tensor shape overflows")?;
            let expected = n * e.dtype.size();
            ensure!(
                bytes.len() == expected,
                "tensor `{}` file has {} bytes, manifest shape {:?} of {:?} needs {expected}",
                e.name,
                bytes.len(),
                e.shape,
                e.dtype
            );
            let data = TensorData::from_bytes(e.dtype, &bytes);
            ensure!(
                bundle.tensors.insert(e.name.clone(), Tensor { shape: e.shape, data }).is_none(),
                "tensor `{}` listed twice",
                e.name
            );
        }
        Ok(bundle)
    }
}
