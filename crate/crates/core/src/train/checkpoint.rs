//! Checkpoint files.
//!
//! Little-endian layout: magic `CVAC`, version `u32`, entry count `u32`,
//! then three sections of `count` entries each (values, Adam first moments,
//! Adam second moments), then the step counter as `u64`. An entry is a name
//! length `u16`, the name bytes, rank `u8`, one `u32` per dimension, and the
//! `f64` payload. Every section repeats the names and shapes so each one can
//! be checked independently.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{ParamEntry, ParameterStore};

const MAGIC: &[u8; 4] = b"CVAC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let sections: [fn(&ParamEntry) -> &Tensor; 3] = [|e| &e.value, |e| &e.m, |e| &e.v];
    for get in sections {
        for e in store.entries() {
            put_entry(&mut out, &e.name, get(e));
        }
    }
    out.extend_from_slice(&store.step.to_le_bytes());
    out
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    decode_checkpoint(&fs::read(path)?)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn fail<T>(&self, at: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: at as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return self.fail(
                self.pos,
                format!("truncated {what}: need {n} bytes, {left} left"),
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let start = self.pos;
        let len = self.u16("name length")? as usize;
        let name = match std::str::from_utf8(self.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return self.fail(start + 2, "parameter name is not UTF-8"),
        };
        let rank_at = self.pos;
        let rank = self.u8("rank")? as usize;
        if rank == 0 || rank > 4 {
            return self.fail(rank_at, format!("`{name}` has unsupported rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(n) = n.filter(|&n| n > 0).and_then(|n| n.checked_mul(8)) else {
            return self.fail(rank_at, format!("`{name}` has invalid shape {shape:?}"));
        };
        let payload_at = self.pos;
        let data = self
            .take(n, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        match Tensor::new(shape, data) {
            Ok(t) => Ok((name, t)),
            Err(_) => self.fail(payload_at, format!("`{name}` holds non-finite values")),
        }
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic, expected CVAC");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = r.entry()?;
        if store.id(&name).is_some() {
            return r.fail(at, format!("duplicate parameter `{name}`"));
        }
        store.register(&name, t)?;
    }
    for section in ["first moment", "second moment"] {
        for i in 0..count {
            let at = r.pos;
            let (name, t) = r.entry()?;
            let e = &mut store.entries_mut()[i];
            if name != e.name || t.shape() != e.value.shape() {
                return r.fail(
                    at,
                    format!("{section} entry `{name}` does not match `{}`", e.name),
                );
            }
            if section == "first moment" {
                e.m = t;
            } else {
                e.v = t;
            }
        }
    }
    store.step = r.u64("step")?;
    if r.pos != buf.len() {
        return r.fail(r.pos, format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore {
        let mut s = ParameterStore::new();
        let a = s
            .register(
                "enc.w",
                Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1e-300, 5.0, -7.5]).unwrap(),
            )
            .unwrap();
        s.register("b", Tensor::vector(vec![std::f64::consts::PI]).unwrap())
            .unwrap();
        s.entry_mut(a).m = Tensor::filled(&[2, 3], 0.25);
        s.entry_mut(a).v = Tensor::filled(&[2, 3], 1e-9);
        s.step = 42;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.step, 42);
        for (a, b) in s.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode_checkpoint(&sample());
        for cut in 0..bytes.len() {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_version() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        assert_eq!(
            encode_checkpoint(&load_checkpoint(&path).unwrap()),
            encode_checkpoint(&sample())
        );
    }
}
