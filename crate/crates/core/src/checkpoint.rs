//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TKGE"  u32 version
//! repeated until EOF:
//!   u32 name_len, name (utf-8), u32 rank, u64 dims[rank], f64 payload[prod(dims)]
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, TkgError};
use crate::optim::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TKGE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        NamedTensor::new(name, t.shape().to_vec(), t.data().to_vec())
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TkgError::Validation(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TkgError::Validation(
            "not a TKGE checkpoint (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(TkgError::Validation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| TkgError::Validation("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| TkgError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<NamedTensor>> {
    let buf = fs::read(path).map_err(|e| TkgError::io(path, e))?;
    decode(&buf)
}

/// Every parameter of `params`, in visit order.
pub fn collect(params: &dyn Parameters) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    params.visit(&mut |name, t| out.push(NamedTensor::from_tensor(name, t)));
    out
}

/// Replaces each parameter with the stored tensor of the same name.
///
/// Every parameter must be present with a matching shape; extra entries are ignored.
pub fn restore(params: &mut dyn Parameters, entries: &[NamedTensor]) -> Result<()> {
    let by_name: HashMap<&str, &NamedTensor> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut problem = None;
    params.visit_mut(&mut |name, t| {
        if problem.is_some() {
            return;
        }
        match by_name.get(name) {
            Some(e) if e.shape == t.shape() => *t = Tensor::param(e.data.clone(), &e.shape),
            Some(e) => {
                problem = Some(format!(
                    "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                    e.shape,
                    t.shape()
                ))
            }
            None => problem = Some(format!("checkpoint lacks parameter '{name}'")),
        }
    });
    match problem {
        Some(msg) => Err(TkgError::Validation(msg)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            entries in prop::collection::vec(
                ("[a-z.]{0,12}", prop::collection::vec(1usize..4, 0..3)),
                0..4,
            ),
            seed in any::<u64>(),
        ) {
            let tensors: Vec<NamedTensor> = entries
                .into_iter()
                .enumerate()
                .map(|(k, (name, shape))| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|i| (seed as f64).sin() * (i + k) as f64 - 0.5).collect();
                    NamedTensor::new(name, shape, data)
                })
                .collect();
            let back = decode(&encode(&tensors)).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[NamedTensor::new("w", vec![2], vec![1.0, -2.5])]);
        assert_eq!(&bytes[0..4], b"TKGE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'w');
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[33..41].try_into().unwrap()), -2.5);
        assert_eq!(bytes.len(), 41);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
        let mut bytes = encode(&[NamedTensor::new("w", vec![2], vec![1.0, 2.0])]);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut params = vec![Tensor::param(vec![0.0; 2], &[2])];
        let good = vec![NamedTensor::new("0", vec![2], vec![3.0, 4.0])];
        restore(&mut params, &good).unwrap();
        assert_eq!(params[0].data(), &[3.0, 4.0]);
        let bad = vec![NamedTensor::new("0", vec![3], vec![0.0; 3])];
        assert!(restore(&mut params, &bad).is_err());
        assert!(restore(&mut params, &[]).is_err());
    }
}
