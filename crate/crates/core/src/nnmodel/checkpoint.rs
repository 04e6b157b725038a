//! Binary checkpoint format for flat parameter (or gradient) vectors.
//!
//! Layout, all integers little-endian:
//!
//! | bytes       | field                                   |
//! |-------------|-----------------------------------------|
//! | 4           | magic `ARAW`                            |
//! | 2           | format version (currently 1)            |
//! | 2           | reserved, zero                          |
//! | 4           | epoch / round (u32)                     |
//! | 8           | model seed (u64)                        |
//! | 4           | number of layer dims `L` (u32)          |
//! | 4 * L       | layer dims `[input, hidden.., classes]` |
//! | 8           | value count `n` (u64)                   |
//! | 8 * n       | values, f64 little-endian               |

use std::io::{Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ARAW";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated or malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.dims.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let _reserved: [u8; 2] = cur.array()?;
        let epoch = u32::from_le_bytes(cur.array()?);
        let seed = u64::from_le_bytes(cur.array()?);
        let ndims = u32::from_le_bytes(cur.array()?) as usize;
        let dims = (0..ndims)
            .map(|_| cur.array().map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = u64::from_le_bytes(cur.array()?) as usize;
        if bytes.len() - cur.pos != n * 8 {
            return Err(CheckpointError::Malformed(format!(
                "expected {} value bytes, found {}",
                n * 8,
                bytes.len() - cur.pos
            )));
        }
        let values = (0..n)
            .map(|_| cur.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            epoch,
            seed,
            dims,
            values,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "unexpected end at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
