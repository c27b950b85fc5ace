//! Binary checkpoint of the global and personalized models.
//!
//! ```text
//! magic        8 bytes   "FEDABC\0\x01"
//! version      u32 LE    1
//! model count  u32 LE    1 + number of clients (global first)
//! per model:
//!   width count  u32 LE          depth + 1
//!   widths       u64 LE × count  [input, hidden..., output]
//!   values       f64 LE          layer by layer: weights row-major [out × in], then bias
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ModelParams;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FEDABC\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

// Guards against allocating from a corrupt header.
const MAX_WIDTHS: u32 = 1 << 10;
const MAX_PARAMS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub global: ModelParams,
    pub personalized: Vec<ModelParams>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_model(w: &mut impl Write, model: &ModelParams) -> Result<()> {
    let widths = model.architecture();
    w.write_all(&(widths.len() as u32).to_le_bytes())?;
    for width in widths {
        w.write_all(&(width as u64).to_le_bytes())?;
    }
    for v in model.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<ModelParams> {
    let count = read_u32(r)?;
    if !(2..=MAX_WIDTHS).contains(&count) {
        return Err(corrupt(format!("{count} layer widths")));
    }
    let widths = (0..count)
        .map(|_| read_u64(r).map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let total: u64 = widths
        .windows(2)
        .map(|w| (w[0] as u64 + 1).saturating_mul(w[1] as u64))
        .fold(0u64, u64::saturating_add);
    if total > MAX_PARAMS {
        return Err(corrupt(format!("{total} parameters")));
    }
    let values = (0..total)
        .map(|_| read_u64(r).map(f64::from_bits))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_flat(&widths, &values)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(1 + self.personalized.len() as u32).to_le_bytes())?;
        write_model(w, &self.global)?;
        for m in &self.personalized {
            write_model(w, m)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        if count == 0 {
            return Err(corrupt("no models"));
        }
        let global = read_model(r)?;
        let personalized = (1..count).map(|_| read_model(r)).collect::<Result<Vec<_>>>()?;
        for m in &personalized {
            global.ensure_same_architecture(m)?;
        }
        Ok(Self {
            global,
            personalized,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
