//! Gradient buffer files: `"HWSG"`, u32 version, u32 splat count, u32 floats
//! per splat, then little-endian f32 values splat by splat.

use std::fs;
use std::path::Path;

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 4] = b"HWSG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientFile {
    pub splats: u32,
    pub per_splat: u32,
    pub values: Vec<f32>,
}

impl GradientFile {
    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Self {
            splats: rows.len() as u32,
            per_splat: N as u32,
            values: rows.iter().flatten().map(|&v| v as f32).collect(),
        }
    }

    pub fn row(&self, splat: usize) -> &[f32] {
        let n = self.per_splat as usize;
        &self.values[splat * n..(splat + 1) * n]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend(MAGIC);
        for v in [VERSION, self.splats, self.per_splat] {
            out.extend(v.to_le_bytes());
        }
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: &str| IoError::parse(path, m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err("not a gradient buffer file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if word(1) != VERSION {
            return Err(err("unsupported gradient file version"));
        }
        let (splats, per_splat) = (word(2), word(3));
        let n = splats as usize * per_splat as usize;
        if bytes.len() != 16 + 4 * n {
            return Err(err("gradient file size does not match its header"));
        }
        let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { splats, per_splat, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| IoError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
