//! `FCT1` binary tensor container.
//!
//! Layout of one record: magic `b"FCT1"`, a version byte (1), a dtype byte
//! (0 = f32, 1 = f64), an ndim byte, `ndim` little-endian u64 extents, then
//! the row-major elements in little-endian order. A file may hold several
//! records back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FCT1";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let width = if dtype == Dtype::F32 { 4 } else { 8 };
    let mut buf = Vec::with_capacity(7 + 8 * t.ndim() + width * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(dtype.code());
    buf.push(t.ndim() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    buf
}

/// Reads one record; `Ok(None)` on clean end of stream.
pub fn read_record<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::Format(e.to_string())),
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut head = [0u8; 3];
    r.read_exact(&mut head).map_err(|e| Error::Format(e.to_string()))?;
    let [version, dtype, ndim] = head;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| Error::Format(e.to_string()))?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = if width == 4 {
        raw.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect()
    } else {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Tensor::new(shape, data).map(Some)
}

pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_record(&mut bytes)? {
        out.push(t);
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[&Tensor], dtype: Dtype) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        w.write_all(&encode(t, dtype)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_tensors(path, &[t], dtype)
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = read_record(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut all = read_tensors(path)?;
    if all.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected one record, found {}",
            path.display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2, 3], vec![0.0; 6]).unwrap();
        let b = encode(&t, Dtype::F32);
        assert_eq!(&b[..4], b"FCT1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 2);
        assert_eq!(u64::from_le_bytes(b[7..15].try_into().unwrap()), 2);
        assert_eq!(b.len(), 7 + 16 + 24);
    }

    #[test]
    fn rejects_unknown_magic_and_version() {
        let t = Tensor::scalar(1.5);
        let mut b = encode(&t, Dtype::F64);
        b[4] = 2;
        assert!(decode_all(&b).is_err());
        let mut b = encode(&t, Dtype::F64);
        b[0] = b'X';
        assert!(decode_all(&b).is_err());
        let mut b = encode(&t, Dtype::F64);
        b[5] = 7;
        assert!(decode_all(&b).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let b = encode(&Tensor::full([4], 1.0), Dtype::F64);
        assert!(decode_all(&b[..b.len() - 3]).is_err());
    }

    #[test]
    fn scalar_and_multi_record() {
        let a = Tensor::scalar(-2.25);
        let b = Tensor::full([3, 1], 7.0);
        let mut bytes = encode(&a, Dtype::F64);
        bytes.extend(encode(&b, Dtype::F32));
        let back = decode_all(&bytes).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 2))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_all(&encode(&t, Dtype::F64)).unwrap();
            prop_assert_eq!(back.len(), 1);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0]), bits(&t));
            prop_assert_eq!(back[0].shape(), t.shape());
        }
    }
}
