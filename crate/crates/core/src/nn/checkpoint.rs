//! `RFNN` named-tensor container.
//!
//! Layout (little-endian): magic `RFNN`, version `u32`, tensor count `u64`,
//! then per tensor: name length `u32`, UTF-8 name, rank `u32`, dims `u64`
//! each, and the raw `f64` payload in row-major order.

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::{Reader, Writer};
use crate::error::Result;

pub const MAGIC: &[u8; 4] = b"RFNN";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(tensors.len() as u64);
    for (name, t) in tensors {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for d in t.shape() {
            w.u64(*d as u64);
        }
        w.f64s(t.data());
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    let out = read_from(&mut r)?;
    r.expect_end()?;
    Ok(out)
}

/// Reads one container from the current position of `r`.
pub fn read_from(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank == 0 {
            return Err(r.err(format!("tensor `{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64()?;
            if d == 0 {
                return Err(r.err(format!("tensor `{name}` has a zero dimension")));
            }
            shape.push(usize::try_from(d).map_err(|_| r.err("dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err("tensor size overflow"))?;
        let data = r.f64s(n)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&store.export_values()))?;
    Ok(())
}

pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    store.load_values(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap()),
            ("b".into(), Tensor::vector(vec![0.1]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in sample().iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupted_magic_and_version_rejected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("unexpected {other:?}"),
        }
    }
}
