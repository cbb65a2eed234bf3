//! Region-feature container.
//!
//! Layout (little-endian): magic `CVAF`, version `u32 = 1`, record count
//! `u32`, then per record: id length `u16`, id bytes (UTF-8), `K u32`,
//! `D u32`, and `K·D` `f32` values in row-major order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::attention::RegionFeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CVAF";
const VERSION: u32 = 1;

/// Feature maps keyed by image id, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureContainer {
    records: Vec<(String, RegionFeatureMap)>,
    index: HashMap<String, usize>,
}

impl FeatureContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record. Ids must be unique and every map must have the same
    /// channel count.
    pub fn insert(&mut self, id: impl Into<String>, map: RegionFeatureMap) -> Result<()> {
        let id = id.into();
        if id.len() > u16::MAX as usize {
            return Err(Error::Validation("image id longer than 65535 bytes".into()));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate image id `{id}`")));
        }
        if let Some(d) = self.channels() {
            if map.channels() != d {
                return Err(Error::Validation(format!(
                    "image `{id}` has {} channels, container has {d}",
                    map.channels()
                )));
            }
        }
        self.index.insert(id.clone(), self.records.len());
        self.records.push((id, map));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&RegionFeatureMap> {
        self.index.get(id).map(|&i| &self.records[i].1)
    }

    pub fn channels(&self) -> Option<usize> {
        self.records.first().map(|(_, m)| m.channels())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RegionFeatureMap)> {
        self.records.iter().map(|(id, m)| (id.as_str(), m))
    }
}

pub fn encode_features(container: &FeatureContainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(container.len() as u32).to_le_bytes());
    for (id, map) in container.iter() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(map.regions() as u32).to_le_bytes());
        out.extend_from_slice(&(map.channels() as u32).to_le_bytes());
        for &x in map.tensor().data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_features(path: &Path, container: &FeatureContainer) -> Result<()> {
    Ok(fs::write(path, encode_features(container))?)
}

pub fn load_features(path: &Path) -> Result<FeatureContainer> {
    decode_features(&fs::read(path)?)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureContainer> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected CVAF".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            what: "feature container",
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("record count")?;
    let mut out = FeatureContainer::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(len, "image id")?).map_err(|_| Error::Format {
            offset: start as u64 + 2,
            message: "image id is not UTF-8".into(),
        })?;
        let dims_at = r.pos;
        let k = r.u32("region count")? as usize;
        let d = r.u32("channel count")? as usize;
        if k == 0 || d == 0 {
            return Err(Error::Format {
                offset: dims_at as u64,
                message: format!("record `{id}` has empty shape {k}x{d}"),
            });
        }
        let n = k
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: dims_at as u64,
                message: "record size overflows".into(),
            })?;
        let payload_at = r.pos;
        let bytes = r.take(n, "feature payload")?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(vec![k, d], data).map_err(|_| Error::Format {
            offset: payload_at as u64,
            message: format!("record `{id}` contains non-finite values"),
        })?;
        out.insert(id, RegionFeatureMap::new(tensor)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(out)
}
