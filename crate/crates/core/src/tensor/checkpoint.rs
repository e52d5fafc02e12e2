//! Binary checkpoint of named tensors plus a JSON metadata block.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ATGCKPT\0"
//! version    u32      1
//! elem_bytes u8       4 (f32) or 8 (f64)
//! meta_len   u64      followed by meta_len bytes of UTF-8 JSON
//! count      u64
//! repeated count times:
//!   name_len u32, name bytes
//!   rank     u32, rank x u64 dims
//!   data     numel x elem_bytes
//! ```

use std::fs;
use std::io;
use std::path::Path;

use super::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"ATGCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> io::Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(invalid("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(invalid(&format!("unsupported checkpoint version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(invalid(&format!(
                "checkpoint stores {width}-byte floats, expected {} ({})",
                T::BYTES,
                T::NAME
            )));
        }
        let meta_len = r.u64()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| invalid("metadata is not UTF-8"))?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| invalid("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * T::BYTES)?;
            let data = raw.chunks(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| invalid(&e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(invalid("trailing bytes after last tensor"));
        }
        Ok(Self { metadata, tensors })
    }
}

/// Peeks at the element width of a checkpoint without decoding it.
pub fn checkpoint_precision(bytes: &[u8]) -> Option<usize> {
    (bytes.len() > 12 && &bytes[..8] == MAGIC).then(|| bytes[12] as usize)
}

/// Writes via a temporary sibling file and an atomic rename.
pub fn write_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> io::Result<()> {
    crate::io::write_atomic(path, &ckpt.to_bytes())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> io::Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(invalid("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            data in proptest::collection::vec(proptest::num::f64::ANY, 0..24),
            meta in "[a-z{}\":0-9]{0,40}",
        ) {
            let n = data.len();
            let ck = Checkpoint {
                metadata: meta,
                tensors: vec![
                    ("w".to_string(), Tensor::new(vec![n], data).unwrap()),
                    ("empty".to_string(), Tensor::<f64>::zeros(&[0, 3])),
                ],
            };
            let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.metadata, ck.metadata.clone());
            for ((na, ta), (nb, tb)) in back.tensors.iter().zip(&ck.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let ck = Checkpoint::<f32> {
            metadata: String::new(),
            tensors: vec![("a".into(), Tensor::zeros(&[2]))],
        };
        let bytes = ck.to_bytes();
        assert_eq!(checkpoint_precision(&bytes), Some(4));
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
