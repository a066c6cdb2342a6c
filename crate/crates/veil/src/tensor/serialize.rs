//! Tensor files: magic "PTNS", little-endian, values stored as f64.
//!
//! Layout: 4-byte magic, u16 version, u16 rank, rank x u64 extents, then
//! numel x f64 row-major data. Byte order is little-endian regardless of
//! host, so files round-trip across platforms.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::shape::numel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PTNS";
const VERSION: u16 = 1;

impl<S: Scalar> Tensor<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + self.rank() * 8 + self.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rank() as u16).to_le_bytes());
        for &d in self.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        self.with_data(|data| {
            for v in data {
                buf.extend_from_slice(&v.into_f64().to_le_bytes());
            }
        });
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor<S>> {
        let fail = |msg: &str| Error::TensorFormat(msg.to_string());
        if bytes.len() < 8 {
            return Err(fail("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::TensorFormat(format!(
                "unsupported version {version}"
            )));
        }
        let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let data_start = 8 + rank * 8;
        if bytes.len() < data_start {
            return Err(fail("truncated shape"));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 8 + i * 8;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            shape.push(d as usize);
        }
        let n = numel(&shape);
        if bytes.len() != data_start + n * 8 {
            return Err(Error::TensorFormat(format!(
                "expected {} data bytes, found {}",
                n * 8,
                bytes.len() - data_start
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = data_start + i * 8;
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            data.push(S::from_f64(v));
        }
        Ok(Tensor::from_vec(shape, data))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor<S>> {
        let bytes = std::fs::read(path)?;
        Tensor::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let t: Tensor<f64> = Tensor::from_vec(
            vec![2, 3],
            vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -2.25, 0.1],
        );
        let back: Tensor<f64> = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn rank0_round_trip() {
        let t: Tensor<f64> = Tensor::scalar(3.25);
        let back: Tensor<f64> = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.item(), 3.25);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t: Tensor<f64> = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let mut bytes = t.to_bytes();
        bytes[0] = b'X';
        assert!(Tensor::<f64>::from_bytes(&bytes).is_err());

        let mut short = t.to_bytes();
        short.truncate(short.len() - 1);
        assert!(Tensor::<f64>::from_bytes(&short).is_err());

        let mut vers = t.to_bytes();
        vers[4] = 9;
        assert!(Tensor::<f64>::from_bytes(&vers).is_err());
    }
}
