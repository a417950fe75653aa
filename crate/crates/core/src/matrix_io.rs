//! Little-endian float32 matrix files, optionally followed by a u32 label block.
//!
//! Layout:
//!
//! ```text
//! 0   magic  b"SBMT"
//! 4   rows   u32
//! 8   cols   u32
//! 12  label block offset u32 (0 = no labels)
//! 16  rows·cols f32, row-major
//! ..  rows u32 labels at the label offset
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"SBMT";
pub const MATRIX_HEADER_LEN: usize = 16;

pub fn encode_matrix(m: &Array2<f32>, labels: Option<&[u32]>) -> Result<Vec<u8>> {
    let (rows, cols) = m.dim();
    if let Some(l) = labels {
        if l.len() != rows {
            return Err(Error::Shape(format!(
                "{} labels for {rows} rows",
                l.len()
            )));
        }
    }
    let payload = rows * cols * 4;
    let label_offset = if labels.is_some() {
        MATRIX_HEADER_LEN + payload
    } else {
        0
    };
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + payload + rows * 4);
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&to_u32(rows, "rows")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cols, "cols")?.to_le_bytes());
    out.extend_from_slice(&to_u32(label_offset, "label offset")?.to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        for v in l {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<(Array2<f32>, Option<Vec<u32>>)> {
    if bytes.len() < MATRIX_HEADER_LEN || bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format("not a matrix file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols, label_offset) = (word(4), word(8), word(12));
    let payload_end = MATRIX_HEADER_LEN + rows * cols * 4;
    if bytes.len() < payload_end {
        return Err(Error::Format("truncated matrix payload".into()));
    }
    let data: Vec<f32> = bytes[MATRIX_HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    let labels = if label_offset == 0 {
        None
    } else {
        let end = label_offset + rows * 4;
        if label_offset < payload_end || bytes.len() < end {
            return Err(Error::Format("bad label block offset".into()));
        }
        Some(
            bytes[label_offset..end]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    Ok((m, labels))
}

pub fn write_matrix(path: &Path, m: &Array2<f32>, labels: Option<&[u32]>) -> Result<()> {
    fs::write(path, encode_matrix(m, labels)?)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(Array2<f32>, Option<Vec<u32>>)> {
    decode_matrix(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Array2::from_shape_vec((2, 3), vec![1.0f32, 2., 3., 4., 5., 6.]).unwrap();
        let bytes = encode_matrix(&m, Some(&[7, 9])).unwrap();
        assert_eq!(&bytes[..4], b"SBMT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 16 + 24);
        assert_eq!(bytes.len(), 16 + 24 + 8);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_matrix(b"nope").is_err());
        let mut bytes = encode_matrix(&Array2::zeros((2, 2)), None).unwrap();
        bytes.truncate(20);
        assert!(decode_matrix(&bytes).is_err());
        assert!(encode_matrix(&Array2::zeros((2, 2)), Some(&[1])).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>(), with_labels in any::<bool>()) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| (seed as f32) * 1e-3 - (i * cols + j) as f32);
            let labels: Vec<u32> = (0..rows as u32).map(|i| i ^ seed).collect();
            let l = with_labels.then_some(labels.as_slice());
            let (back, bl) = decode_matrix(&encode_matrix(&m, l).unwrap()).unwrap();
            prop_assert_eq!(back, m);
            prop_assert_eq!(bl.as_deref(), l);
        }
    }
}
