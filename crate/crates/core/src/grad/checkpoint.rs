//! `MVPF` parameter files.
//!
//! Layout (all integers little-endian):
//! magic `b"MVPF"`, `u32` version, then until end of file one record per
//! parameter: `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims,
//! `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVPF";
pub const VERSION: u32 = 1;

pub fn write_records<W: Write>(mut w: W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(buf: &[u8], pos: &mut usize) -> Result<[u8; N]> {
    let end = *pos + N;
    let s = buf
        .get(*pos..end)
        .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", *pos)))?;
    *pos = end;
    Ok(s.try_into().unwrap())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    if &take::<4>(&buf, &mut pos)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut pos)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while pos < buf.len() {
        let len = u32::from_le_bytes(take(&buf, &mut pos)?) as usize;
        let name = buf
            .get(pos..pos + len)
            .ok_or_else(|| Error::Format("truncated parameter name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        pos += len;
        let rank = u32::from_le_bytes(take(&buf, &mut pos)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&buf, &mut pos)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(take(&buf, &mut pos)?) as f64);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_records(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let recs = vec![("w".to_string(), Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap())];
        let mut bytes = Vec::new();
        write_records(&mut bytes, &recs).unwrap();
        let mut want = b"MVPF".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'w');
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_records(&b"NOPE\x01\0\0\0"[..]).is_err());
        assert!(read_records(&b"MVPF\x01\0\0\0\x05\0\0\0ab"[..]).is_err());
        assert!(read_records(&b"MVPF\x02\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            vals in prop::collection::vec(any::<f32>(), 1..40),
            name in "[a-z.0-9]{1,12}",
        ) {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let recs = vec![(name, t)];
            let mut a = Vec::new();
            write_records(&mut a, &recs).unwrap();
            let back = read_records(&a[..]).unwrap();
            let mut b = Vec::new();
            write_records(&mut b, &back).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
