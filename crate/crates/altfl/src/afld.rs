//! The AFLD tensor container. Layout is documented in `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use altfl_core::data::DataError;
use altfl_core::model::Shape;
use altfl_core::{Dataset, Provenance};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"AFLD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;

static DIGITS: &[u8] = include_bytes!("../data/digits8x8.afld");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    /// Little-endian IEEE-754 single precision.
    F32 = 0,
    /// Byte `b` stands for `b / 255`.
    U8 = 1,
}

#[derive(Debug, Error)]
pub enum AfldError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not an AFLD file")]
    BadMagic,
    #[error("unsupported AFLD version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("unknown provenance code {0}")]
    BadProvenance(u8),
    #[error("expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("label {0} does not fit in 16 bits")]
    LabelRange(usize),
    #[error("datasets with mixed provenance cannot be stored")]
    MixedProvenance,
    #[error(transparent)]
    Data(#[from] DataError),
}

fn u32_at(b: &[u8], o: usize) -> usize {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]) as usize
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, AfldError> {
    if bytes.len() < HEADER_LEN {
        return Err(AfldError::Length { expected: HEADER_LEN, actual: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(AfldError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(AfldError::UnsupportedVersion(version));
    }
    let dtype = match bytes[6] {
        0 => Dtype::F32,
        1 => Dtype::U8,
        d => return Err(AfldError::BadDtype(d)),
    };
    let provenance = match bytes[7] {
        0 => Provenance::Authentic,
        1 => Provenance::Synthetic,
        p => return Err(AfldError::BadProvenance(p)),
    };
    let shape = Shape::new(u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16));
    let (count, classes) = (u32_at(bytes, 20), u32_at(bytes, 24));
    let width = if dtype == Dtype::F32 { 4 } else { 1 };
    let expected = HEADER_LEN + 2 * count + width * count * shape.len();
    if bytes.len() != expected {
        return Err(AfldError::Length { expected, actual: bytes.len() });
    }
    let labels = bytes[HEADER_LEN..HEADER_LEN + 2 * count].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
    let body = &bytes[HEADER_LEN + 2 * count..];
    let samples = match dtype {
        Dtype::U8 => body.iter().map(|&b| f64::from(b) / 255.0).collect(),
        Dtype::F32 => body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect(),
    };
    Ok(Dataset::new(shape, classes, samples, labels, provenance)?)
}

/// Serializes `ds`. `U8` rounds each value clamped to `[0, 1]` to the
/// nearest 1/255, `F32` rounds to single precision.
pub fn encode(ds: &Dataset, dtype: Dtype) -> Result<Vec<u8>, AfldError> {
    let prov = ds.provenance().first().copied().unwrap_or(Provenance::Authentic);
    if ds.provenance().iter().any(|p| *p != prov) {
        return Err(AfldError::MixedProvenance);
    }
    let shape = ds.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * ds.len() + 4 * ds.samples().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(match prov {
        Provenance::Authentic => 0,
        Provenance::Synthetic => 1,
    });
    for v in [shape.channels, shape.height, shape.width, ds.len(), ds.classes()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in ds.labels() {
        let l16 = u16::try_from(l).map_err(|_| AfldError::LabelRange(l))?;
        out.extend_from_slice(&l16.to_le_bytes());
    }
    match dtype {
        Dtype::U8 => out.extend(ds.samples().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
        Dtype::F32 => ds.samples().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Dataset, AfldError> {
    decode(&fs::read(path)?)
}

pub fn write(path: &Path, ds: &Dataset, dtype: Dtype) -> Result<(), AfldError> {
    fs::write(path, encode(ds, dtype)?)?;
    Ok(())
}

/// The bundled 8x8 handwritten-digit set (1797 samples, 10 classes).
pub fn bundled_digits() -> Dataset {
    decode(DIGITS).expect("bundled dataset is well formed")
}
