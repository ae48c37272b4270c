//! `.cdmf` density sequence files.
//!
//! Layout, all integers little-endian `u32`:
//! `CDMF`, version (1), W, H, T, frame rate in millihertz, then `T·H·W`
//! little-endian `f32` values, frame-major then row-major.

use std::path::Path;

use super::{DensityMap, DensitySequence};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDMF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

pub fn encode_sequence(seq: &DensitySequence) -> Vec<u8> {
    let (w, h, t) = (seq.width(), seq.height(), seq.len());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * w * h * t);
    out.extend_from_slice(MAGIC);
    let millihertz = (seq.frame_rate() * 1000.0).round().min(u32::MAX as f64) as u32;
    for field in [VERSION, w as u32, h as u32, t as u32, millihertz] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for frame in seq.frames() {
        for v in frame.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_sequence(bytes: &[u8]) -> Result<DensitySequence> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CDMF magic bytes".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CDMF version {version}")));
    }
    let w = read_u32(bytes, 8) as usize;
    let h = read_u32(bytes, 12) as usize;
    let t = read_u32(bytes, 16) as usize;
    let millihertz = read_u32(bytes, 20);
    if w == 0 || h == 0 || t == 0 {
        return Err(Error::Format(format!("zero extent in header ({w}x{h}x{t})")));
    }
    let payload = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(t))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("extents {w}x{h}x{t} overflow")))?;
    if bytes.len() < payload {
        return Err(Error::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - payload
        )));
    }
    let plane = w * h;
    let frames = bytes[HEADER_LEN..]
        .chunks_exact(4 * plane)
        .enumerate()
        .map(|(i, chunk)| {
            let values: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect();
            DensityMap::new(w, h, values)
                .map_err(|e| Error::Format(format!("frame {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    DensitySequence::new(frames, millihertz as f64 / 1000.0)
}

pub fn write_sequence(seq: &DensitySequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<DensitySequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> DensitySequence {
        let frames = (0..3)
            .map(|f| {
                let vals = (0..12).map(|i| ((i + f * 5) % 7) as f32 / 7.0).collect();
                DensityMap::new(4, 3, vals).unwrap()
            })
            .collect();
        DensitySequence::new(frames, 25.0).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_sequence(&sample());
        assert_eq!(&bytes[..4], b"CDMF");
        assert_eq!(read_u32(&bytes, 4), 1);
        assert_eq!(read_u32(&bytes, 8), 4);
        assert_eq!(read_u32(&bytes, 12), 3);
        assert_eq!(read_u32(&bytes, 16), 3);
        assert_eq!(read_u32(&bytes, 20), 25_000);
        assert_eq!(bytes.len(), 24 + 4 * 36);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cdmf");
        write_sequence(&sample(), &path).unwrap();
        assert_eq!(read_sequence(&path).unwrap(), sample());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_sequence(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode_sequence(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_sequence(b"CD"), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncation_and_overflow() {
        let mut bytes = encode_sequence(&sample());
        bytes[16..20].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(decode_sequence(&bytes), Err(Error::Truncated { .. })));
        assert!(matches!(decode_sequence(&bytes[..10]), Err(Error::Truncated { .. })));

        let mut huge = encode_sequence(&sample());
        for at in [8, 12, 16] {
            huge[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_sequence(&huge).is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut bytes = encode_sequence(&sample());
        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_sequence(&bytes).is_err());
        bytes[24..28].copy_from_slice(&1.5f32.to_le_bytes());
        assert!(decode_sequence(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, t in 1usize..4,
            seed in prop::collection::vec(0.0f32..=1.0, 150),
            mhz in 0u32..100_000,
        ) {
            let frames = (0..t)
                .map(|f| DensityMap::new(w, h, seed[f * w * h..(f + 1) * w * h].to_vec()).unwrap())
                .collect();
            let seq = DensitySequence::new(frames, mhz as f64 / 1000.0).unwrap();
            let back = decode_sequence(&encode_sequence(&seq)).unwrap();
            prop_assert_eq!(encode_sequence(&back), encode_sequence(&seq));
        }
    }
}
