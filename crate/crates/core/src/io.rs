//! Little-endian binary matrix files: `magic`, `u32 rows`, `u32 cols`, then
//! `rows * cols` 32-bit floats in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8] = b"LSTF";
pub const MEL_MAGIC: &[u8] = b"LSTM0";

pub fn encode_matrix<F: Scalar>(magic: &[u8], t: &Tensor<F>) -> Result<Vec<u8>> {
    if t.rank() != 2 {
        return Err(Error::dim("encode_matrix", t.shape(), &[0, 0]));
    }
    let mut buf = Vec::with_capacity(magic.len() + 8 + 4 * t.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(t.shape()[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(t.shape()[1] as u32).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_matrix<F: Scalar>(magic: &[u8], bytes: &[u8], path: &Path) -> Result<Tensor<F>> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let rest = &bytes[magic.len()..];
    if rest.len() < 8 {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    let rows = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let body = &rest[8..];
    if body.len() != rows * cols * 4 {
        return Err(if body.len() < rows * cols * 4 {
            Error::Truncated(path.to_path_buf())
        } else {
            Error::Format {
                path: path.to_path_buf(),
                detail: "trailing bytes after matrix".into(),
            }
        });
    }
    let data = body
        .chunks_exact(4)
        .map(|c| <F as Scalar>::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn write_matrix<F: Scalar>(path: &Path, magic: &[u8], t: &Tensor<F>) -> Result<()> {
    fs::write(path, encode_matrix(magic, t)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix<F: Scalar>(path: &Path, magic: &[u8]) -> Result<Tensor<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(magic, &bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_matrix(MEL_MAGIC, &t).unwrap();
        assert_eq!(&b[..5], b"LSTM0");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &1.0f32.to_le_bytes());
        let back: Tensor<f32> = decode_matrix(MEL_MAGIC, &b, Path::new("x")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::<f32>::zeros(vec![2, 2]);
        let b = encode_matrix(FEATURE_MAGIC, &t).unwrap();
        assert!(matches!(
            decode_matrix::<f32>(MEL_MAGIC, &b, Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            decode_matrix::<f32>(FEATURE_MAGIC, &b[..b.len() - 1], Path::new("x")),
            Err(Error::Truncated(_))
        ));
    }
}
