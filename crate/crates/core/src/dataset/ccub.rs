use std::path::Path;

use crate::codec::ConnectivityCube;
use crate::error::{ensure, Error, Result};
use crate::grid::PatternKind;

pub const CCUB_MAGIC: &[u8; 4] = b"CCUB";
pub const CCUB_VERSION: u8 = 1;
pub const CCUB_HEADER_LEN: usize = 15;

fn row_bytes(width: usize, channels: usize) -> usize {
    (width * channels).div_ceil(8)
}

/// Serializes a cube. Binary cubes are bit-packed (MSB first, each row padded
/// to a whole byte); anything else is stored as little-endian f32.
pub fn encode_ccub(cube: &ConnectivityCube) -> Vec<u8> {
    let (h, w, c) = (cube.height(), cube.width(), cube.channels());
    let binary = cube.is_binary();
    let mut out = Vec::with_capacity(CCUB_HEADER_LEN + h * w * c * 4);
    out.extend_from_slice(CCUB_MAGIC);
    out.push(CCUB_VERSION);
    out.push(cube.pattern().id());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(binary as u8);
    if binary {
        for row in cube.values().chunks(w * c) {
            let mut packed = vec![0u8; row_bytes(w, c)];
            for (i, &v) in row.iter().enumerate() {
                if v == 1.0 {
                    packed[i / 8] |= 0x80 >> (i % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
    } else {
        for v in cube.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_ccub(bytes: &[u8]) -> Result<ConnectivityCube> {
    ensure!(bytes.len() >= CCUB_HEADER_LEN, Format, "cube header truncated ({} bytes)", bytes.len());
    ensure!(&bytes[..4] == CCUB_MAGIC, Format, "bad cube magic {:?}", &bytes[..4]);
    ensure!(bytes[4] == CCUB_VERSION, Format, "unsupported cube version {}", bytes[4]);
    let pattern = PatternKind::from_id(bytes[5]).map_err(|e| Error::Format(e.to_string()))?;
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let c = pattern.channel_count();
    let payload = &bytes[CCUB_HEADER_LEN..];
    let values = match bytes[14] {
        1 => {
            let rb = row_bytes(w, c);
            ensure!(
                payload.len() == h * rb,
                Format,
                "bit-packed payload is {} bytes, expected {}",
                payload.len(),
                h * rb
            );
            let mut values = Vec::with_capacity(h * w * c);
            for row in payload.chunks(rb.max(1)).take(h) {
                for i in 0..w * c {
                    values.push(((row[i / 8] >> (7 - i % 8)) & 1) as f32);
                }
            }
            values
        }
        0 => {
            let want = h * w * c * 4;
            ensure!(payload.len() == want, Format, "f32 payload is {} bytes, expected {want}", payload.len());
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        }
        flag => return Err(Error::Format(format!("invalid binary flag {flag}"))),
    };
    ConnectivityCube::new(h, w, pattern, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_ccub(cube: &ConnectivityCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ccub(cube)).map_err(|e| Error::io(path, e))
}

pub fn read_ccub(path: impl AsRef<Path>) -> Result<ConnectivityCube> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ccub(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode;
    use crate::grid::BinaryMask;

    #[test]
    fn packed_size() {
        let mut cube = ConnectivityCube::zeros(4, 4, PatternKind::N8);
        cube.set(1, 2, 3, 1.0);
        let bytes = encode_ccub(&cube);
        assert_eq!(bytes.len(), CCUB_HEADER_LEN + 16);
        assert_eq!(decode_ccub(&bytes).unwrap(), cube);
    }

    #[test]
    fn header_layout() {
        let cube = encode(&BinaryMask::from_fn(3, 5, |r, _| r == 1).unwrap(), PatternKind::N4);
        let bytes = encode_ccub(&cube);
        assert_eq!(&bytes[..6], b"CCUB\x01\x00");
        assert_eq!(&bytes[6..14], &[3, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(bytes[14], 1);
        // row 1: every pixel has left/right flags where neighbours exist; C = 4 → 20 bits → 3 bytes
        assert_eq!(bytes.len(), CCUB_HEADER_LEN + 3 * 3);
    }

    #[test]
    fn float_roundtrip() {
        let vals: Vec<f32> = (0..2 * 3 * 12).map(|i| (i as f32 * 0.37).fract()).collect();
        let cube = ConnectivityCube::new(2, 3, PatternKind::N12, vals).unwrap();
        let bytes = encode_ccub(&cube);
        assert_eq!(bytes[14], 0);
        assert_eq!(bytes.len(), CCUB_HEADER_LEN + 2 * 3 * 12 * 4);
        assert_eq!(decode_ccub(&bytes).unwrap(), cube);
    }

    #[test]
    fn corrupt_inputs() {
        let cube = ConnectivityCube::zeros(2, 2, PatternKind::N8);
        let mut bytes = encode_ccub(&cube);
        assert!(decode_ccub(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ccub(&bytes[..10]).is_err());
        bytes.push(0);
        assert!(decode_ccub(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(decode_ccub(&bytes), Err(Error::Format(_))));
        bytes[0] = b'C';
        bytes[4] = 2;
        assert!(decode_ccub(&bytes).is_err());
        bytes[4] = 1;
        bytes[5] = 7;
        assert!(decode_ccub(&bytes).is_err());
    }
}
