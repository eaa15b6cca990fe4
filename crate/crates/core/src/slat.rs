//! SLAT binary format (little-endian):
//!
//! ```text
//! "SLAT"            4 bytes magic
//! u32 version       currently 1
//! u32 K             grid resolution
//! u32 C             feature channels
//! u64 L             active voxel count
//! L x (u16 x, u16 y, u16 z)   positions, canonical order
//! L x C f32                   features, in position order
//! ```
//!
//! Readers reject unsorted or duplicate positions and trailing bytes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::latent::{LatentError, StructuredLatent, Voxel};

pub const MAGIC: [u8; 4] = *b"SLAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SlatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported SLAT version {0}")]
    VersionMismatch(u32),
    #[error("file ends before the declared payload")]
    TruncatedFile,
    #[error("payload violates latent invariants: {0}")]
    InvariantViolation(String),
    #[error("unexpected bytes after the feature payload")]
    TrailingBytes,
    #[error("resolution {0} does not fit the u16 position encoding")]
    ResolutionTooLarge(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_slat<W: Write>(latent: &StructuredLatent, mut sink: W) -> Result<(), SlatError> {
    if latent.resolution() > u16::MAX as u32 + 1 {
        return Err(SlatError::ResolutionTooLarge(latent.resolution()));
    }
    let mut buf = Vec::with_capacity(24 + latent.len() * (6 + 4 * latent.channels()));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&latent.resolution().to_le_bytes());
    buf.extend_from_slice(&(latent.channels() as u32).to_le_bytes());
    buf.extend_from_slice(&(latent.len() as u64).to_le_bytes());
    for p in latent.positions() {
        for c in p.to_array() {
            buf.extend_from_slice(&(c as u16).to_le_bytes());
        }
    }
    for v in latent.features() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), SlatError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => SlatError::TruncatedFile,
        _ => SlatError::Io(e),
    })
}

fn read_u32<R: Read>(source: &mut R) -> Result<u32, SlatError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(source, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_slat<R: Read>(mut source: R) -> Result<StructuredLatent, SlatError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut source, &mut magic)?;
    if magic != MAGIC {
        return Err(SlatError::BadMagic(magic));
    }
    let version = read_u32(&mut source)?;
    if version != VERSION {
        return Err(SlatError::VersionMismatch(version));
    }
    let resolution = read_u32(&mut source)?;
    let channels = read_u32(&mut source)? as usize;
    let mut lb = [0u8; 8];
    read_exact_or_truncated(&mut source, &mut lb)?;
    let count = u64::from_le_bytes(lb);

    // Read through `take` so a corrupt count cannot trigger a huge allocation.
    let pos_bytes = count.checked_mul(6).ok_or(SlatError::TruncatedFile)?;
    let mut raw = Vec::new();
    (&mut source).take(pos_bytes).read_to_end(&mut raw)?;
    if raw.len() as u64 != pos_bytes {
        return Err(SlatError::TruncatedFile);
    }
    let positions: Vec<Voxel> = raw
        .chunks_exact(6)
        .map(|c| {
            Voxel::new(
                u16::from_le_bytes([c[0], c[1]]) as u32,
                u16::from_le_bytes([c[2], c[3]]) as u32,
                u16::from_le_bytes([c[4], c[5]]) as u32,
            )
        })
        .collect();
    if let Some(w) = positions.windows(2).find(|w| w[0] >= w[1]) {
        return Err(SlatError::InvariantViolation(format!(
            "positions not in canonical order at {} -> {}",
            w[0], w[1]
        )));
    }

    let feat_bytes = count
        .checked_mul(channels as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or(SlatError::TruncatedFile)?;
    raw.clear();
    (&mut source).take(feat_bytes).read_to_end(&mut raw)?;
    if raw.len() as u64 != feat_bytes {
        return Err(SlatError::TruncatedFile);
    }
    let features: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    if source.read(&mut [0u8; 1])? != 0 {
        return Err(SlatError::TrailingBytes);
    }
    StructuredLatent::new(resolution, channels, positions, features)
        .map_err(|e: LatentError| SlatError::InvariantViolation(e.to_string()))
}

pub fn save_slat(latent: &StructuredLatent, path: &Path) -> Result<(), SlatError> {
    write_slat(latent, BufWriter::new(File::create(path)?))
}

pub fn load_slat(path: &Path) -> Result<StructuredLatent, SlatError> {
    read_slat(BufReader::new(File::open(path)?))
}
