//! RVOL: a 48-byte little-endian header followed by `f32` voxels stored width
//! fastest, then height, then depth.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `RVOL`                            |
//! | 4      | 4    | format version (u32)                    |
//! | 8      | 12   | extents d, h, w (u32)                   |
//! | 20     | 12   | spacing d, h, w in mm (f32)             |
//! | 32     | 1    | value tag: 0 HU, 1 normalized, 2 μ, 3 mask |
//! | 33     | 15   | reserved, zero                          |
//! | 48     | 4·n  | voxels (f32)                            |

use std::path::Path;

use tokenct_core::preprocess::{ValueKind, Volume};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVOL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;

pub fn encode_rvol(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.voxels().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for e in v.extents() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out.push(v.kind as u8);
    out.extend_from_slice(&[0; 15]);
    for &x in v.voxels() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses RVOL bytes; `path` only labels errors.
pub fn decode_rvol(bytes: &[u8], path: &Path) -> Result<Volume> {
    let format = |offset: usize, message: String| Error::Format { path: path.into(), offset: offset as u64, message };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(format(0, format!("bad magic {found:?}, expected \"RVOL\"")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            offset: bytes.len() as u64,
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(format(4, format!("unknown format version {version}")));
    }
    let extents: [usize; 3] = std::array::from_fn(|a| u32_at(bytes, 8 + 4 * a) as usize);
    if extents.contains(&0) {
        return Err(format(8, format!("zero extent in {extents:?}")));
    }
    let spacing: [f64; 3] = std::array::from_fn(|a| f32_at(bytes, 20 + 4 * a) as f64);
    if let Some(a) = spacing.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(format(20 + 4 * a, format!("spacing {} must be positive", spacing[a])));
    }
    let tag = bytes[32];
    let Some(kind) = ValueKind::from_tag(tag) else {
        return Err(format(32, format!("unknown value tag {tag}")));
    };
    if let Some(i) = bytes[33..HEADER_LEN].iter().position(|&b| b != 0) {
        return Err(format(33 + i, "reserved byte is not zero".into()));
    }
    let count = extents.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
    let expected = count.and_then(|c| c.checked_mul(4)).ok_or_else(|| format(8, format!("extents {extents:?} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            offset: bytes.len() as u64,
            expected: (HEADER_LEN + expected) as u64,
            actual: bytes.len() as u64,
        });
    }
    if payload.len() > expected {
        return Err(format(HEADER_LEN + expected, format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    let voxels = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(Volume::new(extents, spacing, kind, voxels)?)
}

pub fn write_rvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_rvol(v)).map_err(|e| Error::io(path, e))
}

pub fn read_rvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rvol(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let v: Vec<f64> = (0..24).map(|i| (i as f32 * 0.37 - 3.0) as f64).collect();
        Volume::new([2, 3, 4], [1.0, 2.5, 0.75], ValueKind::Normalized, v).unwrap()
    }

    fn decode(b: &[u8]) -> Result<Volume> {
        decode_rvol(b, Path::new("mem"))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let v = sample();
        let bytes = encode_rvol(&v);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 24);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_rvol(&back), bytes);
    }

    #[test]
    fn header_fields_sit_at_documented_offsets() {
        let bytes = encode_rvol(&sample());
        assert_eq!(&bytes[0..4], b"RVOL");
        assert_eq!(u32_at(&bytes, 4), 1);
        assert_eq!([u32_at(&bytes, 8), u32_at(&bytes, 12), u32_at(&bytes, 16)], [2, 3, 4]);
        assert_eq!(f32_at(&bytes, 24), 2.5);
        assert_eq!(bytes[32], 1);
        // voxel (z=0, y=0, x=1) follows voxel (0, 0, 0)
        assert_eq!(f32_at(&bytes, 52), sample().get(0, 0, 1) as f32);
    }

    #[test]
    fn malformed_files_name_the_offset() {
        let good = encode_rvol(&sample());
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 4, .. })));
        let mut b = good.clone();
        b[32] = 7;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 32, .. })));
        let mut b = good.clone();
        b[40] = 1;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 40, .. })));
        let short = &good[..good.len() - 4];
        match decode(short) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, good.len() as u64);
                assert_eq!(actual, good.len() as u64 - 4);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(decode(&good[..20]), Err(Error::Truncated { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));
    }
}
