//! ETNS tensor container and the named-tensor bundle built on it.
//!
//! ETNS layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic      "ETNS" (0x45 0x54 0x4E 0x53)
//! offset 4   u8         version = 1
//! offset 5   u8         dtype   (1 = f32, 2 = f64, IEEE-754 little-endian)
//! offset 6   u8         ndim
//! offset 7   u8         reserved = 0
//! offset 8   ndim x u32 dims
//!            payload    row-major values
//! ```
//!
//! A bundle ("ETNB") stores a UTF-8 metadata document followed by a sequence
//! of named ETNS records:
//!
//! ```text
//! "ETNB" | u8 version = 1 | 3 x u8 reserved = 0 | u32 meta_len | meta
//! u32 count | count x (u32 name_len | name | ETNS record)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ETNS";
pub const BUNDLE_MAGIC: [u8; 4] = *b"ETNB";
pub const VERSION: u8 = 1;

/// Tensor of either supported width, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            AnyTensor::F32(_) => f32::DTYPE,
            AnyTensor::F64(_) => f64::DTYPE,
        }
    }

    /// Converts to `T`; exact when the stored width already is `T`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn header_len(ndim: usize) -> usize {
    8 + 4 * ndim
}

pub fn encode<T: Scalar>(tensor: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::Usage(format!("rank {} exceeds 255", tensor.rank())));
    }
    out.reserve(header_len(tensor.rank()) + tensor.numel() * T::WIDTH);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE, tensor.rank() as u8, 0]);
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Usage(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn to_bytes<T: Scalar>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode(tensor, &mut out)?;
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.base + self.pos,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn err(&self, back: usize, msg: String) -> Error {
        Error::Format {
            offset: self.base + self.pos - back,
            msg,
        }
    }
}

fn decode_at(cur: &mut Cursor<'_>) -> Result<AnyTensor> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(cur.err(4, format!("bad magic {magic:02x?}")));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(cur.err(1, format!("unsupported version {version}")));
    }
    let dtype = cur.u8("dtype")?;
    if dtype != f32::DTYPE && dtype != f64::DTYPE {
        return Err(cur.err(1, format!("unknown dtype {dtype}")));
    }
    let ndim = cur.u8("ndim")? as usize;
    let reserved = cur.u8("reserved")?;
    if reserved != 0 {
        return Err(cur.err(1, format!("reserved byte is {reserved}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(cur.u32("dims")? as usize);
    }
    let n: usize = shape.iter().product();
    Ok(match dtype {
        1 => AnyTensor::F32(read_payload::<f32>(cur, shape, n)?),
        _ => AnyTensor::F64(read_payload::<f64>(cur, shape, n)?),
    })
}

fn read_payload<T: Scalar>(cur: &mut Cursor<'_>, shape: Vec<usize>, n: usize) -> Result<Tensor<T>> {
    let bytes = cur.take(n * T::WIDTH, "payload")?;
    let data = bytes.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes one ETNS record; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        base: 0,
    };
    let t = decode_at(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            msg: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(t)
}

/// Decodes a record of exactly width `T`.
pub fn decode_as<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let any = decode(bytes)?;
    if any.dtype() != T::DTYPE {
        return Err(Error::Format {
            offset: 5,
            msg: format!("dtype {} where {} was expected", any.dtype(), T::DTYPE),
        });
    }
    Ok(any.cast())
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(tensor)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode_as(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Metadata document plus ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub meta: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Bundle {
    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_bundle<'a, T: Scalar>(
    meta: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&[VERSION, 0, 0, 0]);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let tensors: Vec<_> = tensors.into_iter().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        base: 0,
    };
    let magic = cur.take(4, "bundle magic")?;
    if magic != BUNDLE_MAGIC {
        return Err(cur.err(4, format!("bad bundle magic {magic:02x?}")));
    }
    let version = cur.u8("bundle version")?;
    if version != VERSION {
        return Err(cur.err(1, format!("unsupported bundle version {version}")));
    }
    cur.take(3, "reserved")?;
    let meta_len = cur.u32("meta length")? as usize;
    let meta = std::str::from_utf8(cur.take(meta_len, "meta")?)
        .map_err(|e| cur.err(meta_len, format!("meta is not UTF-8: {e}")))?
        .to_string();
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|e| cur.err(len, format!("name is not UTF-8: {e}")))?
            .to_string();
        tensors.push((name, decode_at(&mut cur)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            msg: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(Bundle { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip() {
        let eye = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let bytes = to_bytes(&eye).unwrap();
        assert_eq!(&bytes[..8], &[0x45, 0x54, 0x4E, 0x53, 1, 1, 2, 0]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(decode_as::<f32>(&bytes).unwrap(), eye);
    }

    #[test]
    fn header_arithmetic() {
        let t = Tensor::<f32>::zeros(&[50, 3, 32, 64]);
        let bytes = to_bytes(&t).unwrap();
        assert_eq!(header_len(4), 24);
        assert_eq!(bytes.len(), 24 + 50 * 3 * 32 * 64 * 4);
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut bytes = to_bytes(&Tensor::<f64>::zeros(&[3])).unwrap();
        bytes[5] = 3;
        match decode(&bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 5);
                assert!(msg.contains("dtype 3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let good = to_bytes(&Tensor::<f64>::zeros(&[2, 3])).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));
        let cut = &good[..good.len() - 3];
        match decode(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        assert!(decode_as::<f32>(&good).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let b = Tensor::from_fn(&[4], |i| -(i as f64));
        let bytes = encode_bundle("x = 1\n", [("a", &a), ("b.c", &b)]).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back.meta, "x = 1\n");
        assert_eq!(back.get("a").unwrap().cast::<f64>(), a);
        assert_eq!(back.get("b.c").unwrap().cast::<f64>(), b);
        assert!(decode_bundle(&bytes[..bytes.len() - 1]).is_err());
    }
}
