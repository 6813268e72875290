//! Descriptor interchange file.
//!
//! Little-endian layout:
//!
//! | field     | type | notes                         |
//! |-----------|------|-------------------------------|
//! | magic     | 4 B  | `TDSC`                        |
//! | version   | u16  | 1                             |
//! | grid_h    | u32  |                               |
//! | grid_w    | u32  |                               |
//! | dim       | u32  |                               |
//! | stride    | u16  |                               |
//! | origin_u  | f32  | pixel centre of cell (0, 0)   |
//! | origin_v  | f32  |                               |
//! | source_w  | u32  | image the grid was built on   |
//! | source_h  | u32  |                               |
//! | data      | f32  | grid_h · grid_w · dim, row-major |

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::DescriptorMap;

pub const MAGIC: [u8; 4] = *b"TDSC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 2 + 4 + 4 + 4 + 4;
/// Largest payload accepted, in f32 values (4 GiB of data).
pub const MAX_VALUES: u64 = 1 << 30;
/// Vectors whose norm deviates more than this are re-normalised on load.
const RENORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DescriptorFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"TDSC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    VersionMismatch(u16),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("descriptor dimensions overflow: {0}")]
    DimensionOverflow(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

fn payload_values(grid_h: u64, grid_w: u64, dim: u64) -> Result<u64, DescriptorFileError> {
    grid_h
        .checked_mul(grid_w)
        .and_then(|v| v.checked_mul(dim))
        .filter(|&v| v <= MAX_VALUES)
        .ok_or_else(|| DescriptorFileError::DimensionOverflow(format!("{grid_h}x{grid_w}x{dim}")))
}

/// Serialises `map` to bytes.
pub fn encode(map: &DescriptorMap) -> Result<Vec<u8>, DescriptorFileError> {
    let overflow = |what: &str| DescriptorFileError::DimensionOverflow(what.to_string());
    let grid_h = u32::try_from(map.grid_h).map_err(|_| overflow("grid_h"))?;
    let grid_w = u32::try_from(map.grid_w).map_err(|_| overflow("grid_w"))?;
    let dim = u32::try_from(map.dim).map_err(|_| overflow("dim"))?;
    let stride = u16::try_from(map.stride).map_err(|_| overflow("stride"))?;
    let n = payload_values(grid_h as u64, grid_w as u64, dim as u64)?;
    if n != map.data.len() as u64 {
        return Err(DescriptorFileError::InvalidHeader(format!(
            "data holds {} values, header implies {n}",
            map.data.len()
        )));
    }

    let mut buf = Vec::with_capacity(HEADER_LEN + map.data.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&grid_h.to_le_bytes());
    buf.extend_from_slice(&grid_w.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&stride.to_le_bytes());
    buf.extend_from_slice(&map.origin_u.to_le_bytes());
    buf.extend_from_slice(&map.origin_v.to_le_bytes());
    buf.extend_from_slice(&map.source_w.to_le_bytes());
    buf.extend_from_slice(&map.source_h.to_le_bytes());
    for v in &map.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

/// Parses and validates an interchange buffer.
pub fn decode(bytes: &[u8]) -> Result<DescriptorMap, DescriptorFileError> {
    if bytes.len() < 4 {
        return Err(DescriptorFileError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DescriptorFileError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DescriptorFileError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16();
    if version != VERSION {
        return Err(DescriptorFileError::VersionMismatch(version));
    }
    let grid_h = cur.u32();
    let grid_w = cur.u32();
    let dim = cur.u32();
    let stride = cur.u16();
    let origin_u = cur.f32();
    let origin_v = cur.f32();
    let source_w = cur.u32();
    let source_h = cur.u32();

    let n = payload_values(grid_h as u64, grid_w as u64, dim as u64)?;
    let expected = HEADER_LEN as u64 + n * 4;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(DescriptorFileError::Truncated { expected, found });
    }
    if found > expected {
        return Err(DescriptorFileError::TrailingBytes(found - expected));
    }

    let invalid = |m: String| Err(DescriptorFileError::InvalidHeader(m));
    if grid_h == 0 || grid_w == 0 || dim == 0 {
        return invalid(format!("empty grid {grid_h}x{grid_w}x{dim}"));
    }
    if stride == 0 {
        return invalid("stride is 0".into());
    }
    if !(origin_u.is_finite() && origin_v.is_finite() && origin_u >= 0.0 && origin_v >= 0.0) {
        return invalid(format!("origin ({origin_u}, {origin_v}) is invalid"));
    }
    let last_u = origin_u as f64 + (grid_w - 1) as f64 * stride as f64;
    let last_v = origin_v as f64 + (grid_h - 1) as f64 * stride as f64;
    if last_u >= source_w as f64 || last_v >= source_h as f64 {
        return invalid(format!(
            "grid reaches ({last_u}, {last_v}) outside {source_w}x{source_h} source"
        ));
    }

    let mut data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return invalid("payload contains non-finite values".into());
    }
    renormalize(&mut data, dim as usize);

    Ok(DescriptorMap {
        grid_h: grid_h as usize,
        grid_w: grid_w as usize,
        dim: dim as usize,
        stride: stride as usize,
        origin_u,
        origin_v,
        source_w,
        source_h,
        data,
    })
}

/// Re-normalises non-void vectors whose norm is off by more than the tolerance.
fn renormalize(data: &mut [f32], dim: usize) {
    for v in data.chunks_exact_mut(dim) {
        let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 && (n - 1.0).abs() > RENORM_TOLERANCE {
            v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        }
    }
}

pub fn save_descriptor_file(map: &DescriptorMap, path: &Path) -> Result<(), DescriptorFileError> {
    fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn load_descriptor_file(path: &Path) -> Result<DescriptorMap, DescriptorFileError> {
    decode(&fs::read(path)?)
}
