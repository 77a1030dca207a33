//! Array container shared by motions, codebooks and parameter matrices.
//!
//! Two encodings carry the same content, a shape and row-major `f64` data:
//!
//! * JSON: `{"shape": [d0, d1, ...], "data": [x0, x1, ...]}`. Floats are
//!   written in shortest round-trip form, so reading back is exact.
//! * Binary, all integers and floats little-endian:
//!
//!   | offset      | size    | content                          |
//!   |-------------|---------|----------------------------------|
//!   | 0           | 4       | magic `ARR1`                     |
//!   | 4           | 4       | `u32` rank `r`                   |
//!   | 8           | 8·r     | `u64` dimensions                 |
//!   | 8 + 8·r     | 8·n     | `f64` data, row-major, n = ∏ dims |
//!
//! Motions use shape `[T, J, 3]`; matrices use `[rows, cols]`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaffold::Motion;
use crate::tmd::Codebook;

const MAGIC: &[u8; 4] = b"ARR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayDoc {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let doc = Self { shape, data };
        doc.check()?;
        Ok(doc)
    }

    fn check(&self) -> Result<()> {
        let n = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Container("shape overflows".into()))?;
        if n != self.data.len() {
            return Err(Error::Container(format!("shape {:?} needs {n} values, found {}", self.shape, self.data.len())));
        }
        Ok(())
    }

    pub fn from_motion(m: &Motion) -> Self {
        Self { shape: vec![m.frames(), m.joints(), 3], data: m.as_slice().to_vec() }
    }

    pub fn into_motion(self) -> Result<Motion> {
        match self.shape[..] {
            [t, j, 3] => Motion::new(t, j, self.data),
            _ => Err(Error::Container(format!("motion needs shape [T, J, 3], found {:?}", self.shape))),
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self { shape: vec![m.nrows(), m.ncols()], data: m.transpose().as_slice().to_vec() }
    }

    pub fn into_matrix(self) -> Result<DMatrix<f64>> {
        match self.shape[..] {
            [r, c] => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            _ => Err(Error::Container(format!("matrix needs rank 2, found shape {:?}", self.shape))),
        }
    }

    pub fn into_codebook(self) -> Result<Codebook> {
        Codebook::new(self.into_matrix()?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s)?;
        doc.check()?;
        Ok(doc)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * (self.shape.len() + self.data.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Container("truncated binary array".into());
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(Error::Container("missing ARR1 magic".into()));
        }
        let word = |at: usize, len: usize| bytes.get(at..at + len).ok_or_else(short);
        let rank = u32::from_le_bytes(word(4, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for k in 0..rank {
            let d = u64::from_le_bytes(word(8 + 8 * k, 8)?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| Error::Container("dimension exceeds usize".into()))?);
        }
        let body = &bytes[8 + 8 * rank..];
        if !body.len().is_multiple_of(8) {
            return Err(short());
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let doc = Self { shape, data };
        doc.check()?;
        Ok(doc)
    }

    /// Writes JSON for a `.json` extension and binary otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        if is_json(path) {
            fs::write(path, self.to_json()?)?;
        } else {
            fs::write(path, self.to_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if is_json(path) {
            Self::from_json(&fs::read_to_string(path)?)
        } else {
            Self::from_bytes(&fs::read(path)?)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}
