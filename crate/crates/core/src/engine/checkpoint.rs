//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IRNW" | version: u32 | record*
//! record = name_len: u32 | name: UTF-8 | dtype: u8 | rank: u8 | extents: u64 × rank | values
//! ```
//!
//! dtype 0 is f32 and 1 is f64. Records continue until end of file.

use std::path::Path;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IRNW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn encode<T: Scalar>(tensors: &[NamedTensor<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for nt in tensors {
        let name = nt.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE);
        let shape = nt.tensor.shape();
        out.push(shape.len() as u8);
        for e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in nt.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<NamedTensor<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Parse(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != T::DTYPE {
            return Err(Error::Parse(format!(
                "tensor {name}: dtype code {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        if rank > 4 {
            return Err(Error::Parse(format!("tensor {name}: rank {rank} > 4")));
        }
        let mut shape = [1usize; 4];
        for slot in shape.iter_mut().skip(4 - rank) {
            *slot = r.u64()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::from_vec(shape, data)?,
        });
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &[NamedTensor<T>]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<NamedTensor<T>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f32>(), 1..40),
            name in "[a-z0-9._-]{1,12}",
        ) {
            let t = Tensor::from_vec([1, 1, 1, values.len()], values.clone()).unwrap();
            let recs = vec![NamedTensor { name, tensor: t }];
            let back: Vec<NamedTensor<f32>> = decode(&encode(&recs)).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].name, &recs[0].name);
            let a: Vec<u32> = back[0].tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn header_layout() {
        let recs = vec![NamedTensor {
            name: "w".into(),
            tensor: Tensor::<f64>::from_vec([2, 1, 1, 3], vec![0.5; 6]).unwrap(),
        }];
        let bytes = encode(&recs);
        assert_eq!(&bytes[..4], b"IRNW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'w');
        assert_eq!(bytes[13], 1); // f64
        assert_eq!(bytes[14], 4); // rank
        assert_eq!(bytes.len(), 15 + 4 * 8 + 6 * 8);
    }

    #[test]
    fn rejects_wrong_dtype_and_magic() {
        let recs = vec![NamedTensor {
            name: "w".into(),
            tensor: Tensor::<f64>::scalar(1.0),
        }];
        let bytes = encode(&recs);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(b"NOPE\x01\0\0\0").is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
