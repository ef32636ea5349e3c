//! Portable little-endian tensor blocks.
//!
//! ```text
//! magic    8 bytes   "PCBMTNSR"
//! version  u32       1
//! count    u32       number of tensors
//! count times:
//!   name_len u32, name (UTF-8)
//!   kind     u8      0 = trainable, 1 = buffer
//!   ndim     u32
//!   dims     u64 x ndim
//!   data     f64 x prod(dims)
//! ```

use std::io::{Read, Write};

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use super::NumericsError;

pub const TENSOR_MAGIC: &[u8; 8] = b"PCBMTNSR";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_store(store: &ParamStore, out: &mut impl Write) -> Result<(), NumericsError> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[match store.kind(id) {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        }])?;
        let t = store.get(id);
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_store(input: &mut impl Read) -> Result<ParamStore, NumericsError> {
    let mut magic = [0u8; 8];
    read_exact(input, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(NumericsError::Format("bad tensor block magic".into()));
    }
    let version = read_u32(input)?;
    if version != TENSOR_VERSION {
        return Err(NumericsError::Format(format!(
            "tensor block version {version}, expected {TENSOR_VERSION}"
        )));
    }
    let count = read_u32(input)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        if name_len > 4096 {
            return Err(NumericsError::Format(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        read_exact(input, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumericsError::Format("tensor name is not UTF-8".into()))?;
        let mut kind = [0u8; 1];
        read_exact(input, &mut kind)?;
        let kind = match kind[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(NumericsError::Format(format!("unknown tensor kind {k}"))),
        };
        let ndim = read_u32(input)? as usize;
        if ndim > 8 {
            return Err(NumericsError::Format(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            read_exact(input, &mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        if len > 1 << 28 {
            return Err(NumericsError::Format(format!(
                "implausible tensor size {len}"
            )));
        }
        let mut raw = vec![0u8; len * 8];
        read_exact(input, &mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if store.id_of(&name).is_some() {
            return Err(NumericsError::Format(format!("duplicate tensor {name}")));
        }
        store.add(name, kind, Tensor::new(shape, data));
    }
    Ok(store)
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<(), NumericsError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NumericsError::Format("truncated tensor block".into()),
        _ => NumericsError::Io(e),
    })
}

fn read_u32(input: &mut impl Read) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.trainable(
            "conv.weight",
            Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1 - 0.4),
        );
        s.buffer(
            "bn.running_mean",
            Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]),
        );
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_store();
        let mut bytes = Vec::new();
        write_store(&s, &mut bytes).unwrap();
        let back = read_store(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.fingerprint(), s.fingerprint());
        assert_eq!(
            back.kind(back.id_of("bn.running_mean").unwrap()),
            ParamKind::Buffer
        );
    }

    #[test]
    fn layout_header_is_documented_bytes() {
        let mut bytes = Vec::new();
        write_store(&sample_store(), &mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"PCBMTNSR");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 11);
        assert_eq!(&bytes[20..31], b"conv.weight");
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let mut bytes = Vec::new();
        write_store(&sample_store(), &mut bytes).unwrap();
        for cut in [4, 13, 40, bytes.len() - 1] {
            let err = read_store(&mut &bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{cut}: {err}");
        }
        bytes[8] = 9;
        assert!(read_store(&mut bytes.as_slice())
            .unwrap_err()
            .to_string()
            .contains("version 9"));
    }
}
