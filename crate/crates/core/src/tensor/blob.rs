// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor blobs.
//!
//! Layout: magic `PVT1`, one dtype byte (0 = f32, 1 = f64, 2 = i64), one rank
//! byte, `rank` little-endian u64 extents, then the row-major little-endian
//! payload.

use super::{Storage, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVT1";

/// Decoded blob contents.
#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    Float(Storage),
    I64(Vec<i64>),
}

fn header(out: &mut Vec<u8>, code: u8, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len()).map_err(|_| Error::CorruptBlob(format!("rank {} too large", shape.len())))?;
    out.extend_from_slice(MAGIC);
    out.push(code);
    out.push(rank);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(())
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 8 * t.numel());
    header(&mut out, t.dtype().code(), t.shape())?;
    match t.storage() {
        Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn encode_i64(shape: &[usize], values: &[i64]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::ShapeMismatch {
            op: "encode_i64",
            lhs: shape.to_vec(),
            rhs: vec![values.len()],
        });
    }
    let mut out = Vec::new();
    header(&mut out, 2, shape)?;
    values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<(Vec<usize>, BlobData)> {
    let corrupt = |why: &str| Error::CorruptBlob(why.to_string());
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let code = bytes[4];
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(|| corrupt("truncated header"))?;
        shape.push(u64::from_le_bytes(chunk.try_into().expect("8 bytes")) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let width = match code {
        0 => 4,
        1 | 2 => 8,
        other => return Err(Error::CorruptBlob(format!("unknown dtype code {other}"))),
    };
    let payload = &bytes[pos..];
    if payload.len() != n * width {
        return Err(corrupt("payload length does not match extents"));
    }
    let data = match code {
        0 => BlobData::Float(Storage::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
        )),
        1 => BlobData::Float(Storage::F64(
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
        )),
        _ => BlobData::I64(payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8"))).collect()),
    };
    Ok((shape, data))
}

/// Decode a float blob into a constant tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    match decode_raw(bytes)? {
        (shape, BlobData::Float(storage)) => Tensor::new(shape, storage),
        (_, BlobData::I64(_)) => Err(Error::CorruptBlob("expected a float blob, found i64".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_f64(&[2, 3], &[0.0; 6], DType::F32).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"PVT1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 22 + 6 * 4);
    }

    #[test]
    fn i64_blob() {
        let bytes = encode_i64(&[3], &[1, -2, 3]).unwrap();
        assert_eq!(bytes[4], 2);
        let (shape, data) = decode_raw(&bytes).unwrap();
        assert_eq!(shape, vec![3]);
        assert_eq!(data, BlobData::I64(vec![1, -2, 3]));
    }

    #[test]
    fn truncated_is_rejected() {
        let t = Tensor::from_f64(&[4], &[1.0; 4], DType::F64).unwrap();
        let bytes = encode(&t).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::CorruptBlob(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), f32_mode in any::<bool>()) {
            let dtype = if f32_mode { DType::F32 } else { DType::F64 };
            let t = Tensor::from_f64(&[values.len()], &values, dtype).unwrap();
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert!(back.values_eq(&t));
            prop_assert_eq!(back.dtype(), dtype);
        }
    }
}
