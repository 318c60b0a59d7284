//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`, reals little-endian `f64`:
//!
//! ```text
//! "TCASR1" | n_params | { name_len | name (UTF-8) | rank | dims[rank] | values } * n_params
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"TCASR1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        store.insert(name, Tensor::new(shape, values)?)?;
    }
    r.finish()?;
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Arithmetic mean of compatible parameter sets.
pub fn average(stores: &[ParamStore]) -> Result<ParamStore> {
    let Some(first) = stores.first() else {
        return Err(Error::Checkpoint("nothing to average".into()));
    };
    for s in &stores[1..] {
        first.check_compatible(s)?;
    }
    let mut out = first.clone();
    let n = stores.len() as f64;
    let tables: Vec<Vec<&[f64]>> = stores
        .iter()
        .map(|s| s.iter().map(|p| p.value.data()).collect())
        .collect();
    let mut column = Vec::with_capacity(stores.len());
    for (i, p) in out.iter_mut().enumerate() {
        for (j, v) in p.value.data_mut().iter_mut().enumerate() {
            column.clear();
            column.extend(tables.iter().map(|t| t[i][j]));
            // sorted offsets from the minimum: exact for identical inputs and
            // independent of checkpoint order
            column.sort_by(f64::total_cmp);
            let base = column[0];
            *v = base + column.iter().map(|x| (x - base) / n).sum::<f64>();
        }
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -0.5, 1e-300, f64::MAX]).unwrap())
            .unwrap();
        s.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..6], b"TCASR1");
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn averaging() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let avg = average(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg.by_name("w").unwrap().value.data(), &[1.0]);
        let rev = average(&[b, a]).unwrap();
        assert_eq!(encode(&avg), encode(&rev));

        let same = average(&[sample(), sample(), sample()]).unwrap();
        assert_eq!(encode(&same), encode(&sample()));
    }

    #[test]
    fn mismatched_shapes_refuse_to_average() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(average(&[a, b]), Err(Error::Checkpoint(_))));
    }
}
