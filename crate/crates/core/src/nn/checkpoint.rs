//! Binary checkpoint format.
//!
//! ```text
//! "HAUSR1"                          magic, 6 bytes
//! u64 entry count
//! per entry:
//!   u32 name length, name (UTF-8)
//!   u32 rank, u64 × rank dims
//!   f64 × prod(dims) values
//! u64 version
//! ```
//! All integers and floats are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"HAUSR1";

pub fn write_params<W: Write>(w: &mut W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&params.version().to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated checkpoint: {e}"))
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamSet> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let count = read_u64(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for `{name}`")));
        }
        let dims = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(r)?));
        }
        params
            .insert(name.clone(), Tensor::from_vec(&dims, data)?)
            .map_err(|_| Error::Checkpoint(format!("duplicate entry `{name}`")))?;
    }
    params.set_version(read_u64(r)?);
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_params(&mut BufReader::new(f))
}

/// Save and read back, failing unless the round trip is bit-exact.
pub fn save_verified(path: &Path, params: &ParamSet) -> Result<()> {
    save(path, params)?;
    let back = load(path)?;
    let same = back.version() == params.version()
        && back.len() == params.len()
        && back.iter().zip(params.iter()).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.shape() == t2.shape()
                && t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    if !same {
        return Err(Error::Checkpoint(format!("round trip of {} is not bit-exact", path.display())));
    }
    let marker = dirty_marker(path);
    if marker.exists() {
        fs::remove_file(marker)?;
    }
    Ok(())
}

/// Load a checkpoint, refusing one that carries a dirty marker.
pub fn load_clean(path: &Path) -> Result<ParamSet> {
    if dirty_marker(path).exists() {
        return Err(Error::Checkpoint(format!("{} is a partial checkpoint (dirty marker present)", path.display())));
    }
    load(path)
}

pub fn dirty_marker(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".dirty");
    PathBuf::from(s)
}

/// Save a partial checkpoint and drop a `.dirty` marker next to it.
pub fn save_dirty(path: &Path, params: &ParamSet, reason: &str) -> Result<()> {
    save(path, params)?;
    fs::write(dirty_marker(path), reason)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_params() -> impl Strategy<Value = ParamSet> {
        proptest::collection::btree_map(
            "[a-z]{1,6}(/[a-z]{1,6})?",
            (1usize..4, 1usize..4).prop_flat_map(|(a, b)| {
                proptest::collection::vec(proptest::num::f64::ANY, a * b).prop_map(move |v| (a, b, v))
            }),
            0..5,
        )
        .prop_map(|m| {
            let mut p = ParamSet::new();
            for (k, (a, b, v)) in m {
                p.insert(k, Tensor::from_vec(&[a, b], v).unwrap()).unwrap();
            }
            p
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(p in arb_params(), version in 0u64..1000) {
            let mut p = p;
            p.set_version(version);
            let mut buf = Vec::new();
            write_params(&mut buf, &p).unwrap();
            let back = read_params(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.version(), version);
            for ((n1, t1), (n2, t2)) in back.iter().zip(p.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                for (a, b) in t1.data().iter().zip(t2.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::new();
        p.insert("a".into(), Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..6], b"HAUSR1");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params(&mut bad.as_slice()).is_err());
        assert!(read_params(&mut &buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_params(&mut extra.as_slice()).is_err());
    }

    #[test]
    fn save_verified_and_dirty_marker() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut p = ParamSet::new();
        p.insert("omega/w".into(), Tensor::vector(vec![0.1, -0.2])).unwrap();
        save_verified(&path, &p).unwrap();
        assert_eq!(load(&path).unwrap(), p);
        save_dirty(&path, &p, "worker failed").unwrap();
        assert!(dirty_marker(&path).exists());
    }
}
