//! SPMX dense matrix container and `.meta` key=value sidecars.
//!
//! Layout: `b"SPMX"`, version `u32` LE (= 1), rows `u64` LE, cols `u64` LE,
//! then `rows * cols` little-endian `f64` in row-major order. Nothing follows
//! the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Result, SpxError};

pub const MAGIC: &[u8; 4] = b"SPMX";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(SpxError::Format(format!("SPMX header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(SpxError::Format("bad SPMX magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SpxError::Format(format!("unsupported SPMX version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| SpxError::Format("SPMX dimensions overflow".into()))?;
    if bytes.len() as u64 != expected {
        return Err(SpxError::Format(format!(
            "SPMX payload length {} does not match {rows}x{cols}",
            bytes.len() - HEADER_LEN
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let payload = &bytes[HEADER_LEN..];
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let k = (i * cols + j) * 8;
        f64::from_le_bytes(payload[k..k + 8].try_into().unwrap())
    }))
}

pub fn write(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, encode(m))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    decode(&fs::read(path)?)
}

/// `foo.spmx` -> `foo.meta`.
pub fn meta_path(path: impl AsRef<Path>) -> PathBuf {
    path.as_ref().with_extension("meta")
}

/// Ordered key=value document used for sidecars, profiles and reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| SpxError::Format(format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| SpxError::Format(format!("cannot parse `{key}={raw}`")))
    }

    pub fn encode(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SpxError::Format(format!("line {}: expected key=value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read_to_string(path)?)
    }
}
