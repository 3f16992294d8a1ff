//! Binary checkpoint container.
//!
//! ```text
//! "MEF1"  u32 version  u32 len  config text (UTF-8, key = value lines)
//! repeated: u32 len  name (UTF-8)  u32 rank  rank × u32 extents  f64 data
//! ```
//!
//! Integers and floats are little-endian. Records run to the end of file.

use std::io::Write;
use std::path::Path;

use crate::array::{DenseArray, MAX_RANK};
use crate::config::ConfigMap;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ConfigMap,
    pub records: Vec<(String, DenseArray)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            context: self.context.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail(start, format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(config: ConfigMap) -> Self {
        Self {
            config,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseArray) {
        self.records.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let cfg = self.config.render();
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend(cfg.as_bytes());
        for (name, v) in &self.records {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((v.rank() as u32).to_le_bytes());
            for &e in v.shape() {
                out.extend((e as u32).to_le_bytes());
            }
            for x in v.data() {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container; `context` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, context };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail(0, "bad magic, expected MEF1"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let cfg_at = r.pos;
        let cfg_text = r.text("config")?;
        let config = ConfigMap::parse(&cfg_text).map_err(|e| r.fail(cfg_at, e.to_string()))?;
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let rec_at = r.pos;
            let name = r.text("record name")?;
            let rank = r.u32("record rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(r.fail(rec_at, format!("record `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("record extents")? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8, "record data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
                .collect();
            let value = DenseArray::new(&shape, data).map_err(|e| r.fail(rec_at, e.to_string()))?;
            if records.iter().any(|(n, _)| n == &name) {
                return Err(r.fail(rec_at, format!("duplicate record `{name}`")));
            }
            records.push((name, value));
        }
        Ok(Self { config, records })
    }

    /// Writes to a sibling temporary file first so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
