//! `.mvt` binary tensor files: `"MVT1"`, dtype code (0 = f32, 1 = f64), rank,
//! `rank` little-endian u64 extents, then the row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::{DType, Scalar, Tensor};
use crate::error::{MavrError, Result};

pub const MAGIC: &[u8; 4] = b"MVT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<(Tensor<T>, usize), String> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err("bad magic (expected MVT1)".into());
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| format!("unknown dtype code {}", bytes[4]))?;
    if dtype != T::DTYPE {
        return Err(format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let width = dtype.size();
    let end = header + n * width;
    if bytes.len() < end {
        return Err(format!("payload truncated: need {} bytes, have {}", end, bytes.len()));
    }
    let data = bytes[header..end].chunks_exact(width).map(T::read_le).collect();
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, end))
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    // write-then-rename so concurrent readers never observe a partial file
    let tmp = path.with_extension("mvt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| MavrError::io(&tmp, e))?;
    f.write_all(&encode(t)).map_err(|e| MavrError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| MavrError::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| MavrError::io(path, e))?;
    let (t, used) = decode(&bytes).map_err(|message| MavrError::Format {
        path: path.to_path_buf(),
        message,
    })?;
    if used != bytes.len() {
        return Err(MavrError::Format {
            path: path.to_path_buf(),
            message: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"MVT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn rejects_wrong_dtype_and_magic() {
        let b = encode(&Tensor::<f64>::zeros(&[3]));
        assert!(decode::<f32>(&b).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u32>()) {
            let t = Tensor::<f64>::from_fn(&shape, |i| (i as f64 + seed as f64).sin());
            let (back, used) = decode::<f64>(&encode(&t)).unwrap();
            prop_assert_eq!(used, encode(&t).len());
            prop_assert_eq!(back, t);
        }
    }
}
