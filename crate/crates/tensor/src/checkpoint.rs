//! Binary checkpoint records plus a plain-text manifest.
//!
//! Layout of the binary file (all integers little-endian):
//!
//! ```text
//! magic  "CRSPCKP1"
//! u64    record count
//! repeat:
//!   u64  name length, name bytes (UTF-8)
//!   u64  rank, rank × u64 dims
//!   f64  values (product of dims)
//! ```
//!
//! The manifest lists one record per line: `name<TAB>shape<TAB>fnv1a64`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CRSPCKP1";

/// Path of the manifest written next to `path`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn checksum(t: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Writes records and their manifest.
pub fn save_records(path: &Path, records: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    let mut manifest = String::new();
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t[{}]\t{:016x}\n", dims.join(","), checksum(t)));
    }
    w.flush()?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads all records from a checkpoint file.
pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(TensorError::Format(format!("record name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(TensorError::Format(format!("record '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

impl ParamStore {
    /// Saves every parameter as one named record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<(&str, &Tensor)> = self.iter().collect();
        save_records(path, &records)
    }

    /// Loads values into an existing store of identical layout.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let records = load_records(path)?;
        if records.len() != self.len() {
            return Err(TensorError::Format(format!(
                "checkpoint has {} records, store has {}",
                records.len(),
                self.len()
            )));
        }
        for (name, t) in records {
            let id = self.id(&name)?;
            let dst = self.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *dst = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut s = ParamStore::new();
        s.add(
            "a",
            Tensor::new(vec![2, 3], vec![0.1, -0.0, 1e-310, f64::MAX, -3.5, 7.0]).unwrap(),
        )
        .unwrap();
        s.add("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        s.save(&path).unwrap();
        let mut t = s.clone();
        for x in t.tensors_mut() {
            x.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        t.load_into(&path).unwrap();
        for (x, y) in s.tensors().iter().zip(t.tensors()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let manifest = fs::read_to_string(manifest_path(&path)).unwrap();
        assert_eq!(manifest.lines().count(), 2);
        assert!(manifest.starts_with("a\t[2,3]\t"));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_records(&path), Err(TensorError::Format(_))));
    }
}
