//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "CEWB"
//! version  u32
//! hdr_len  u32
//! header   hdr_len bytes of UTF-8 JSON: {"kind", "meta", "blocks": [{"name", "rows", "cols"}]}
//! blocks   f32 values of every block, in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"CEWB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blocks: Vec<BlockInfo>,
}

/// Named parameter blocks plus free-form metadata (vocabularies, config).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint { kind: kind.to_string(), meta, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.blocks.push((name.into(), t.clone()));
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|(n, t)| BlockInfo { name: n.clone(), rows: t.rows, cols: t.cols })
                .collect(),
        };
        let hdr = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(hdr.len() as u32).to_le_bytes())?;
        w.write_all(&hdr)?;
        for (_, t) in &self.blocks {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hdr_len = read_u32(&mut r)? as usize;
        let mut hdr = vec![0u8; hdr_len];
        r.read_exact(&mut hdr)?;
        let header: Header = serde_json::from_slice(&hdr)?;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for info in header.blocks {
            let n = info.rows * info.cols;
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            blocks.push((info.name, Tensor { rows: info.rows, cols: info.cols, data }));
        }
        Ok(Checkpoint { kind: header.kind, meta: header.meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Copies stored blocks into `targets`, which must match in count and shape.
    pub fn fill(&self, targets: Vec<&mut Tensor>) -> Result<()> {
        if targets.len() != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} blocks, model expects {}",
                self.blocks.len(),
                targets.len()
            )));
        }
        for (t, (name, b)) in targets.into_iter().zip(&self.blocks) {
            if t.rows != b.rows || t.cols != b.cols {
                return Err(Error::Checkpoint(format!(
                    "block {name}: stored {}x{}, expected {}x{}",
                    b.rows, b.cols, t.rows, t.cols
                )));
            }
            t.data.clone_from(&b.data);
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rounds_to_f32() {
        let mut ck = Checkpoint::new("test", serde_json::json!({"a": 1}));
        ck.push("w", &Tensor { rows: 2, cols: 2, data: vec![0.1, -2.0, 3.5, 1e-3] });
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.blocks[0].1.data[0], 0.1f32 as f64);
        assert_eq!(back.blocks[0].1.data[1], -2.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = Checkpoint::read_from(&b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
