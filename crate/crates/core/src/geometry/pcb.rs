//! "PCB1" binary point clouds: an 8-byte magic, a little-endian `u64` point
//! count, then nine little-endian `f32` per point (r,g,b,x,y,z,nx,ny,nz).

use std::fs;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

pub const PCB_MAGIC: [u8; 8] = *b"PCB1\0\0\0\0";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 9 * 4;

pub fn encode_pcb(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + cloud.len() * RECORD_LEN);
    out.extend_from_slice(&PCB_MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in cloud.points() {
        for v in p.row() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes a PCB1 buffer; `origin` is only used in error messages.
pub fn decode_pcb(bytes: &[u8], origin: &Path) -> Result<PointCloud> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(origin, "truncated header"));
    }
    if bytes[..8] != PCB_MAGIC {
        return Err(Error::format(origin, "bad magic (expected PCB1)"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let expected = (n as u128) * RECORD_LEN as u128 + HEADER_LEN as u128;
    if (bytes.len() as u128) < expected {
        return Err(Error::format(
            origin,
            format!("truncated payload: {n} points need {expected} bytes, found {}", bytes.len()),
        ));
    }
    if (bytes.len() as u128) > expected {
        return Err(Error::format(origin, "trailing bytes after payload"));
    }
    let points = bytes[HEADER_LEN..]
        .chunks_exact(RECORD_LEN)
        .map(|rec| {
            let mut row = [0.0f64; 9];
            for (k, c) in rec.chunks_exact(4).enumerate() {
                row[k] = f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64;
            }
            Point::from_row(row)
        })
        .collect();
    PointCloud::new(points).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn read_pcb(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pcb(&bytes, path)
}

pub fn write_pcb(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pcb(cloud)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud::from_rows(&[
            [0.25, 0.5, 1.0, 1.5, -2.0, 3.25, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn layout_is_exact() {
        let bytes = encode_pcb(&sample());
        assert_eq!(&bytes[..8], b"PCB1\0\0\0\0");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 2 * 36);
        // fourth float of the first record is x = 1.5
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.5);
        let back = decode_pcb(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode_pcb(&sample());
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode_pcb(&bytes, Path::new("m")), Err(Error::Format { .. })));
        assert!(decode_pcb(&good[..good.len() - 1], Path::new("m")).is_err());
        assert!(decode_pcb(&good[..10], Path::new("m")).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_pcb(&extra, Path::new("m")).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_pcb("/definitely/not/here.pcb").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/definitely/not/here.pcb"));
    }
}
