//! Tensor serialization.
//!
//! Binary layout (little-endian): magic `DMMT`, `u32` rank, `rank` × `u64`
//! extents, `u8` precision tag (32 or 64), then the raw values in row-major
//! order. A checkpoint is magic `DMMC`, `u32` count, then per entry a `u32`
//! name length, the UTF-8 name and one tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DMMT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMMC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::Format(format!("unknown precision tag {other}"))),
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, precision: Precision) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&[precision.tag()])?;
    match precision {
        Precision::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Precision::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    let precision = Precision::from_tag(read_array::<1, _>(r)?[0])?;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(match precision {
            Precision::F64 => f64::from_le_bytes(read_array(r)?),
            Precision::F32 => f32::from_le_bytes(read_array(r)?) as f64,
        });
    }
    Tensor::from_vec(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor, precision: Precision) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, precision)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

/// Writes a 1-D tensor as one value per line, or a 2-D tensor as one
/// comma-separated row per line.
pub fn write_csv<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    match t.shape() {
        [_] => {
            for v in t.data() {
                writeln!(w, "{v}")?;
            }
        }
        [_, cols] => {
            for row in t.data().chunks((*cols).max(1)) {
                let line: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
        other => return Err(Error::Format(format!("CSV export needs rank 1 or 2, got {other:?}"))),
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        write_tensor(w, &p.value, Precision::F64)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let count = u32::from_le_bytes(read_array(r)?) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        entries.push((name, read_tensor(r)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::F64).unwrap();
        assert_eq!(&buf[..4], b"DMMT");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(buf[16], 64);
        assert_eq!(&buf[17..25], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 17 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_tag() {
        let mut bad = b"XXXX".to_vec();
        bad.extend_from_slice(&0u32.to_le_bytes());
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::scalar(1.0), Precision::F64).unwrap();
        buf[8] = 7;
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn csv_export() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.5, -3.0, 4.0]).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &t).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "1,2.5\n-3,4\n");
        assert!(write_csv(&mut Vec::new(), &Tensor::zeros(&[1, 1, 1])).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::from_vec(&[2], vec![0.25, 3.0]).unwrap());
        store.add("b.c", Tensor::scalar(-1.0));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store).unwrap();
        let entries = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].0, "b.c");
        assert_eq!(&entries[0].1, store.get(store.find("a").unwrap()));
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact_at_both_precisions(
            shape in prop::collection::vec(0usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            use rand::{rngs::StdRng, SeedableRng};
            let t = Tensor::randn(&shape, 1.0, &mut StdRng::seed_from_u64(seed));
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t, Precision::F64).unwrap();
            prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t.clone());

            let narrowed = t.map(|v| v as f32 as f64);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t, Precision::F32).unwrap();
            prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), narrowed);
        }
    }
}
