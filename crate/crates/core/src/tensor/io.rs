//! `TNSR` binary format: magic, four little-endian `u32` dims `(B, C, H, W)`,
//! then the row-major values as little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const HEADER_LEN: usize = 4 + 4 * 4;

pub fn write_to(tensor: &Tensor, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + tensor.len() * 8);
    write_to(tensor, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Reads one tensor from `r`. `origin` only labels errors.
pub fn read_from(r: &mut impl Read, origin: &Path) -> Result<Tensor> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(origin, "truncated tensor header"))?;
    if &header[..4] != MAGIC {
        return Err(Error::format(origin, "bad tensor magic"));
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *d = u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
    }
    let n = numel(shape);
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)
        .map_err(|_| Error::format(origin, format!("truncated tensor body for {shape:?}")))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let t = read_from(&mut cursor, Path::new("<memory>"))?;
    if !cursor.is_empty() {
        return Err(Error::format("<memory>", "trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let t = read_from(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec([1, 2, 1, 1], vec![1.5, -2.0]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(b.len(), HEADER_LEN + 16);
        assert_eq!(&b[20..28], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::full([1, 1, 2, 2], 3.0);
        let mut b = to_bytes(&t);
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in (1usize..3, 1usize..4, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            let shape = [dims.0, dims.1, dims.2, dims.3];
            let mut s = seed;
            let t = Tensor::from_fn(shape, |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            });
            let back = from_bytes(&to_bytes(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
