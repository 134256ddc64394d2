//! Binary checkpoint container.
//!
//! ```text
//! "S3LD" | u32 version | u32 len, encoder layout text | u32 len, metadata text
//! | u32 n_arrays | n × (u32 len, name | u32 ndim | ndim × u32 dim | f32 data)
//! | u32 CRC32 of everything before it
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"S3LD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Scalar state: step counters, EMA alpha, seeds, the resolved run config.
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config_text: impl Into<String>) -> Self {
        Self { config_text: config_text.into(), ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta.get(key).ok_or_else(|| Error::Version(format!("checkpoint lacks {key:?}")))?;
        raw.parse().map_err(|_| Error::Corruption(format!("checkpoint field {key}={raw:?} does not parse")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.arrays.push((name.into(), t));
    }

    /// Stores a parameter set under `group/name`.
    pub fn push_group(&mut self, group: &str, params: &ParamSet<f32>) {
        for (n, t) in params.iter() {
            self.push(format!("{group}/{n}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Arrays stored under `group/`, in file order, with the prefix removed.
    pub fn group(&self, group: &str) -> ParamSet<f32> {
        let prefix = format!("{group}/");
        let mut out = ParamSet::default();
        for (n, t) in &self.arrays {
            if let Some(rest) = n.strip_prefix(&prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config_text);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut b, &meta);
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Version("not a checkpoint file (bad magic)".into()));
        }
        if bytes.len() < 12 {
            return Err(Error::Corruption("checkpoint truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Corruption("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_text = r.string()?;
        let mut meta = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Corruption(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Corruption("array too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Corruption("trailing bytes after the last array".into()));
        }
        Ok(Self { config_text, meta, arrays })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corruption("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corruption("non-UTF-8 text".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("input {40}\n");
        c.set("step", 7);
        c.push("student/a", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 9.0]).unwrap());
        c.push("teacher/a", Tensor::new(vec![1], vec![0.5]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta_get::<usize>("step").unwrap(), 7);
        assert_eq!(back.group("student").names(), &["a".to_string()]);
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corruption(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Corruption(_))));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Version(_))));
        assert!(matches!(Checkpoint::from_bytes(b"RIFF...."), Err(Error::Version(_))));
    }
}
