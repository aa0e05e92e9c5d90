//! Named-tensor archive.
//!
//! A flat sequence of records with no file header:
//!
//! ```text
//! [name_len: u32 LE][name: UTF-8 bytes]
//! [dtype: u8]            0 = float32
//! [rank: u8]
//! [shape: rank x u32 LE]
//! [payload: row-major f32 LE]
//! ```
//!
//! Used for backbone weights, decoder checkpoints and CAM dumps.

use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{Error, Result};

const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(
            IxDyn(&self.shape),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape validated on construction")
    }
}

/// Ordered collection of named float32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<NamedTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Inserts a tensor, replacing any existing entry with the same name in place.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("archive insert", expected, data.len()));
        }
        if shape.len() > u8::MAX as usize || shape.iter().any(|&s| s > u32::MAX as usize) {
            return Err(Error::Archive(format!(
                "tensor `{name}` shape {shape:?} not encodable"
            )));
        }
        let entry = NamedTensor { name, shape, data };
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    pub fn insert_array(
        &mut self,
        name: impl Into<String>,
        array: ArrayViewD<'_, f64>,
    ) -> Result<()> {
        let shape = array.shape().to_vec();
        let data = array.iter().map(|&v| v as f32).collect();
        self.insert(name, shape, data)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Fetches a tensor as f64 and checks its shape.
    pub fn array(&self, name: &str, shape: &[usize]) -> Result<ArrayD<f64>> {
        let entry = self.require(name)?;
        if entry.shape != shape {
            return Err(Error::shape("archive tensor", shape, &entry.shape));
        }
        Ok(entry.to_array())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for &s in &e.shape {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader { bytes, pos: 0 };
        let mut archive = TensorArchive::new();
        while !reader.at_end() {
            let name_len = reader.u32()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?)
                .map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = reader.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Archive(format!(
                    "tensor `{name}` has unsupported dtype tag {dtype}"
                )));
            }
            let rank = reader.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(reader.u32()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .ok_or_else(|| Error::Archive(format!("tensor `{name}` is too large")))?;
            let payload = reader.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| Error::Archive("overflow".into()))?,
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if archive.get(&name).is_some() {
                return Err(Error::Archive(format!("duplicate tensor `{name}`")));
            }
            archive.entries.push(NamedTensor { name, shape, data });
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive(format!("truncated record at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
