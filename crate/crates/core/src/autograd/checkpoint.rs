//! Weight checkpoint files.
//!
//! Layout (all integers in ASCII decimal, single spaces, `\n` line ends):
//!
//! ```text
//! DVP1 <tensor-count>\n
//! then, per tensor, in store order:
//!   <name> <rank> <dim_0> ... <dim_{rank-1}>\n
//!   <product(dims) little-endian IEEE-754 f32 values, no padding>
//! ```
//!
//! Names contain no whitespace. The trainable flag is not stored; loaded
//! parameters are trainable until the caller freezes them.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "DVP1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("{MAGIC} {}\n", store.len()).as_bytes());
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{} {} {}\n", p.name(), p.shape().len(), dims.join(" ")).as_bytes());
        for v in p.value() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> std::result::Result<&'a str, String> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or("truncated header line")?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|e| e.to_string())
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = cur.line()?;
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(format!("bad magic in header {header:?}"));
    }
    let count: usize = parts
        .next()
        .and_then(|c| c.parse().ok())
        .ok_or("bad tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let meta = cur.line()?;
        let fields: Vec<&str> = meta.split(' ').filter(|f| !f.is_empty()).collect();
        let name = *fields.first().ok_or("empty tensor line")?;
        let rank: usize = fields
            .get(1)
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| format!("bad rank for {name}"))?;
        if fields.len() != 2 + rank {
            return Err(format!("bad dims for {name}"));
        }
        let shape: Vec<usize> = fields[2..]
            .iter()
            .map(|d| d.parse().map_err(|_| format!("bad dim for {name}")))
            .collect::<std::result::Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(4 * n).ok_or_else(|| format!("truncated data for {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if store.id(name).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        store.add(name, t);
    }
    if cur.pos != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::Missing(format!("checkpoint {}", path.display())));
    }
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
