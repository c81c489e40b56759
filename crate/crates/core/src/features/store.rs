//! Named-tensor weight container and its binary `NTS1` file format.
//!
//! ```text
//! "NTS1" | u32 count | count × ( u16 name_len | name | u8 rank | rank × u32 dim | prod(dims) × f32 )
//! ```
//! All integers and floats are little-endian; there is no padding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const NTS_MAGIC: &[u8; 4] = b"NTS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::Format {
                entry: name,
                reason: format!("shape {shape:?} needs {count} values, got {}", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                entry: name,
                reason: format!("value {i} is not finite"),
            });
        }
        Ok(Self { name, shape, values })
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(name, shape, values.iter().map(|v| *v as f32).collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| *v as f64).collect()
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: Vec<Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(tensor.name()).is_some() {
            return Err(Error::Format {
                entry: tensor.name,
                reason: "duplicate tensor name".into(),
            });
        }
        self.entries.push(tensor);
        Ok(())
    }

    /// Inserts or replaces a tensor, keeping its original position.
    pub fn set(&mut self, tensor: Tensor) {
        match self.entries.iter_mut().find(|t| t.name == tensor.name) {
            Some(slot) => *slot = tensor,
            None => self.entries.push(tensor),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    /// Looks up a tensor and checks its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::WeightLoad(format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::WeightLoad(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(NTS_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for t in &self.entries {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format {
                entry: t.name.clone(),
                reason: "name longer than 65535 bytes".into(),
            })?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format {
                entry: t.name.clone(),
                reason: "rank above 255".into(),
            })?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for d in &t.shape {
                let d = u32::try_from(*d).map_err(|_| Error::Format {
                    entry: t.name.clone(),
                    reason: "dimension exceeds u32".into(),
                })?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = "<header>";
        let magic = r.take(4, header)?;
        if magic != NTS_MAGIC {
            return Err(Error::Format {
                entry: header.into(),
                reason: format!("bad magic {magic:?}"),
            });
        }
        let count = r.u32(header)? as usize;
        let mut store = TensorStore::new();
        for index in 0..count {
            let placeholder = format!("#{index}");
            let name_len = r.u16(&placeholder)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
                .map_err(|_| Error::Format {
                    entry: placeholder.clone(),
                    reason: "name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Format {
                    entry: name.clone(),
                    reason: "element count overflows".into(),
                })?;
            let raw = r.take(n.saturating_mul(4), &name)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(Tensor::new(name, shape, values)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                entry: "<trailer>".into(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                entry: entry.into(),
                reason: format!("truncated at byte {}", self.bytes.len()),
            }),
        }
    }

    fn u16(&mut self, entry: &str) -> Result<u16> {
        let b = self.take(2, entry)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        let b = self.take(4, entry)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Free-function form of [`TensorStore::load`].
pub fn load_tensor_store(path: &Path) -> Result<TensorStore> {
    TensorStore::load(path)
}

/// Free-function form of [`TensorStore::save`].
pub fn save_tensor_store(store: &TensorStore, path: &Path) -> Result<()> {
    store.save(path)
}
