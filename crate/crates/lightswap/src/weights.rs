//! The FSWT tensor container used for model weights and checkpoints.
//!
//! ```text
//! magic    b"FSWT"
//! version  u32
//! count    u32
//! count × { name_len u32, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!           rank u8, dims u64 × rank, offset u64, nbytes u64 }
//! data     tensors back to back, little-endian
//! ```
//!
//! Offsets are relative to the start of the data section. Tensors are
//! stored in table order with no gaps, and the file ends exactly after the
//! last one, so any truncation or trailing byte is detected.

use std::collections::HashSet;
use std::path::Path;

use lightswap_core::{AnyTensor, DType, Tensor};

use crate::error::{self, Result, WithPath};

pub const MAGIC: &[u8; 4] = b"FSWT";
pub const VERSION: u32 = 1;

pub type Named = Vec<(String, AnyTensor)>;

fn load_err(msg: String) -> lightswap_core::Error {
    lightswap_core::Error::Load(msg)
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

/// Serializes named tensors. Names must be unique and non-empty.
pub fn encode(tensors: &[(String, AnyTensor)]) -> lightswap_core::Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if name.is_empty() || !seen.insert(name.as_str()) {
            return Err(load_err(format!("tensor name `{name}` is empty or repeated")));
        }
        let nbytes = (t.len() * t.dtype().size()) as u64;
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(dtype_code(t.dtype()));
        header.push(t.shape().len() as u8);
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        header.extend_from_slice(&nbytes.to_le_bytes());
        offset += nbytes;
    }
    let mut out = header;
    out.reserve(offset as usize);
    for (_, t) in tensors {
        match t {
            AnyTensor::F32(x) => x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            AnyTensor::F64(x) => x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> lightswap_core::Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(load_err(format!("file truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> lightswap_core::Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> lightswap_core::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> lightswap_core::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    nbytes: usize,
}

/// Parses and validates a whole file.
pub fn decode(bytes: &[u8]) -> lightswap_core::Result<Named> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(load_err("not an FSWT file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(load_err(format!("unsupported FSWT version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    let mut expected_offset = 0u64;
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| load_err(format!("tensor {i} has a non-UTF-8 name")))?
            .to_string();
        if name.is_empty() || !seen.insert(name.clone()) {
            return Err(load_err(format!("tensor name `{name}` is empty or repeated")));
        }
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(load_err(format!("tensor `{name}` has unknown dtype code {c}"))),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let offset = r.u64("offset")?;
        let nbytes = r.u64("byte count")?;
        let elems = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let expect = elems.and_then(|n| n.checked_mul(dtype.size()));
        if expect != Some(nbytes as usize) || shape.contains(&0) {
            return Err(load_err(format!("tensor `{name}`: {nbytes} bytes do not fit shape {shape:?}")));
        }
        if offset != expected_offset {
            return Err(load_err(format!("tensor `{name}` at offset {offset}, expected {expected_offset}")));
        }
        expected_offset += nbytes;
        entries.push(Entry { name, dtype, shape, nbytes: nbytes as usize });
    }
    let data_len = bytes.len() - r.pos;
    if data_len as u64 != expected_offset {
        return Err(load_err(format!("data section has {data_len} bytes, table declares {expected_offset}")));
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let raw = r.take(e.nbytes, &e.name)?;
        let t = match e.dtype {
            DType::F32 => AnyTensor::F32(Tensor::new(
                &e.shape,
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            )?),
            DType::F64 => AnyTensor::F64(Tensor::new(
                &e.shape,
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            )?),
        };
        out.push((e.name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, AnyTensor)]) -> Result<()> {
    let bytes = encode(tensors).at(path)?;
    error::write(path, &bytes)
}

pub fn load(path: &Path) -> Result<Named> {
    decode(&error::read(path)?).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Named {
        vec![
            ("a.weight".into(), AnyTensor::F32(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5))),
            ("stats/mean".into(), AnyTensor::F64(Tensor::new(&[1], vec![f64::MIN_POSITIVE]).unwrap())),
        ]
    }

    #[test]
    fn layout_is_as_documented() {
        let b = encode(&sample()).unwrap();
        assert_eq!(&b[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        let header = 12 + (4 + 8 + 2 + 16 + 16) + (4 + 10 + 2 + 8 + 16);
        assert_eq!(b.len(), header + 6 * 4 + 8);
        assert_eq!(&b[header..header + 4], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn every_truncation_and_extension_is_rejected() {
        let b = encode(&sample()).unwrap();
        for n in 0..b.len() {
            assert!(decode(&b[..n]).is_err(), "prefix {n}");
        }
        let mut long = b.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn header_corruption_is_named() {
        let b = encode(&sample()).unwrap();
        let mut v = b.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(lightswap_core::Error::Load(m)) if m.contains("version 2")));
        let mut m = b.clone();
        m[0] = b'X';
        assert!(decode(&m).is_err());
        let mut dup = sample();
        dup.push(dup[0].clone());
        assert!(encode(&dup).is_err());
        // dtype byte of the first entry
        let mut d = b.clone();
        d[12 + 4 + 8] = 7;
        assert!(matches!(decode(&d), Err(lightswap_core::Error::Load(m)) if m.contains("dtype")));
    }

    fn named() -> impl Strategy<Value = Named> {
        let tensor = (proptest::collection::vec(1..4usize, 0..4), any::<bool>(), any::<u64>()).prop_map(|(shape, f64s, seed)| {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1).rotate_left(17))).collect();
            if f64s {
                AnyTensor::F64(Tensor::new(&shape, vals).unwrap())
            } else {
                AnyTensor::F32(Tensor::new(&shape, vals.iter().map(|&v| v as f32).collect()).unwrap())
            }
        });
        proptest::collection::vec(tensor, 0..6)
            .prop_map(|ts| ts.into_iter().enumerate().map(|(i, t)| (format!("t{i}/ü"), t)).collect())
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(ts in named()) {
            let b = encode(&ts).unwrap();
            let back = decode(&b).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), b);
            prop_assert_eq!(back.len(), ts.len());
        }
    }
}
