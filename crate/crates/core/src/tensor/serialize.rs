//! Binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SITT" | dtype: u8 | rank: u8 | extents: u64 × rank | payload (row-major)
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64.

use std::io::{Read, Write};

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SITT";

/// Bytes occupied by `t` once encoded.
pub fn encoded_len<T: Element>(t: &Tensor<T>) -> usize {
    4 + 1 + 1 + 8 * t.rank() + t.len() * T::DTYPE.size_of()
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t));
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes_into(&mut out);
    }
    out
}

pub fn write_tensor<T: Element>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("<tensor container>", detail)
}

/// Decodes one container from the front of `bytes`, returning the tensor
/// (converted to `T` if stored at the other precision) and the bytes consumed.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing SITT magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad(format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| bad("truncated extents"))?;
        shape.push(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let width = dtype.size_of();
    let payload = bytes
        .get(pos..pos + n * width)
        .ok_or_else(|| bad(format!("truncated payload for shape {shape:?}")))?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, pos + n * width))
}

pub fn read_tensor<T: Element>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    decode(&bytes).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_f64([2, 1], &[1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"SITT");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode::<f32>(b"NOPE\0\0").is_err());
        let mut bytes = encode(&Tensor::<f64>::ones([3]));
        bytes.truncate(bytes.len() - 1);
        assert!(decode::<f64>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let t = Tensor::<f64>::from_fn(shape.clone(), |i| ((seed as f64) + i as f64).sin());
            let (back, used) = decode::<f64>(&encode(&t)).unwrap();
            prop_assert_eq!(used, 6 + 8 * shape.len() + 8 * n);
            prop_assert_eq!(back, t);
        }
    }
}
