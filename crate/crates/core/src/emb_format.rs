//! The `.emb` embedding file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PALE" | u32 version | u32 dim | u64 count
//! count × ( u64 id_len | id_len bytes UTF-8 frame id | dim × float )
//! ```
//!
//! Version 1 stores 32-bit IEEE-754 floats. Version 2 is the same layout with
//! 64-bit floats; snapshots use it for their vector block.

use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 4] = b"PALE";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn from_version(v: u32) -> Option<Self> {
        match v {
            1 => Some(Precision::F32),
            2 => Some(Precision::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbFormatError {
    #[error("bad magic: not an embedding file")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u32),
    #[error("record `{id}` has dimension {actual}, file dimension is {expected}")]
    DimensionMismatch { id: String, expected: usize, actual: usize },
    #[error("frame id is not valid UTF-8")]
    InvalidId,
    #[error("truncated embedding file")]
    Truncated,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Decoded contents of a `.emb` file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbFile {
    pub precision: Precision,
    pub dim: usize,
    pub records: Vec<(String, Vec<f64>)>,
}

pub fn write_f32<W: Write>(w: &mut W, dim: usize, records: &[(String, Vec<f32>)]) -> Result<(), EmbFormatError> {
    write_header(w, Precision::F32, dim, records.len())?;
    for (id, values) in records {
        check_dim(id, dim, values.len())?;
        write_id(w, id)?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, dim: usize, records: &[(String, Vec<f64>)]) -> Result<(), EmbFormatError> {
    write_header(w, Precision::F64, dim, records.len())?;
    for (id, values) in records {
        check_dim(id, dim, values.len())?;
        write_id(w, id)?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn check_dim(id: &str, expected: usize, actual: usize) -> Result<(), EmbFormatError> {
    if expected != actual {
        return Err(EmbFormatError::DimensionMismatch { id: id.to_string(), expected, actual });
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, p: Precision, dim: usize, count: usize) -> Result<(), EmbFormatError> {
    let dim = u32::try_from(dim).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
    w.write_all(MAGIC)?;
    w.write_all(&p.version().to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())?;
    Ok(())
}

fn write_id<W: Write>(w: &mut W, id: &str) -> Result<(), EmbFormatError> {
    w.write_all(&(id.len() as u64).to_le_bytes())?;
    w.write_all(id.as_bytes())?;
    Ok(())
}

/// Reads a whole `.emb` stream. Values widen to `f64` losslessly.
pub fn read<R: Read>(r: &mut R) -> Result<EmbFile, EmbFormatError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(EmbFormatError::BadMagic);
    }
    let version = read_u32(r)?;
    let precision = Precision::from_version(version).ok_or(EmbFormatError::UnsupportedVersion(version))?;
    let dim = read_u32(r)? as usize;
    let count = read_u64(r)?;
    let mut records = Vec::new();
    let mut buf = vec![0u8; dim * precision.width()];
    for _ in 0..count {
        let id_len = read_u64(r)?;
        // Guard against absurd lengths from corrupt headers before allocating.
        if id_len > (1 << 20) {
            return Err(EmbFormatError::Truncated);
        }
        let mut id = vec![0u8; id_len as usize];
        read_exact(r, &mut id)?;
        let id = String::from_utf8(id).map_err(|_| EmbFormatError::InvalidId)?;
        read_exact(r, &mut buf)?;
        let values = match precision {
            Precision::F32 => buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
            Precision::F64 => buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        records.push((id, values));
    }
    Ok(EmbFile { precision, dim, records })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), EmbFormatError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            EmbFormatError::Truncated
        } else {
            EmbFormatError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, EmbFormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, EmbFormatError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut out = Vec::new();
        write_f32(&mut out, 2, &[("ab".into(), vec![1.0, -0.5])]).unwrap();
        assert_eq!(&out[0..4], b"PALE");
        assert_eq!(u32::from_le_bytes(out[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(out[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(out[12..20].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(out[20..28].try_into().unwrap()), 2);
        assert_eq!(&out[28..30], b"ab");
        assert_eq!(&out[30..34], &1.0f32.to_le_bytes());
        assert_eq!(&out[34..38], &(-0.5f32).to_le_bytes());
        assert_eq!(out.len(), 38);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read(&mut &b"NOPE"[..]), Err(EmbFormatError::BadMagic)));
        let mut out = Vec::new();
        write_f32(&mut out, 3, &[("x".into(), vec![1.0, 2.0, 3.0])]).unwrap();
        out[4] = 9;
        assert!(matches!(read(&mut out.as_slice()), Err(EmbFormatError::UnsupportedVersion(9))));
        out[4] = 1;
        out.truncate(out.len() - 1);
        assert!(matches!(read(&mut out.as_slice()), Err(EmbFormatError::Truncated)));
        let err = write_f32(&mut Vec::new(), 3, &[("x".into(), vec![1.0])]).unwrap_err();
        assert!(matches!(err, EmbFormatError::DimensionMismatch { .. }));
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(
            rows in proptest::collection::vec(("[a-z0-9_é-]{0,12}", proptest::collection::vec(-1e30f32..1e30f32, 5)), 0..8)
        ) {
            let mut out = Vec::new();
            write_f32(&mut out, 5, &rows).unwrap();
            let file = read(&mut out.as_slice()).unwrap();
            prop_assert_eq!(file.records.len(), rows.len());
            for ((id, vals), (rid, rvals)) in rows.iter().zip(&file.records) {
                prop_assert_eq!(id, rid);
                for (a, b) in vals.iter().zip(rvals) {
                    prop_assert_eq!(a.to_bits(), (*b as f32).to_bits());
                }
            }
        }

        #[test]
        fn f64_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 3)) {
            let rows = vec![("v".to_string(), vals.clone())];
            let mut out = Vec::new();
            write_f64(&mut out, 3, &rows).unwrap();
            let file = read(&mut out.as_slice()).unwrap();
            prop_assert_eq!(file.precision, Precision::F64);
            for (a, b) in vals.iter().zip(&file.records[0].1) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
