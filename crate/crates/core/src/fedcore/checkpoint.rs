//! On-disk checkpoints.
//!
//! A checkpoint directory holds `manifest.txt` (flat `key=value` lines) and
//! one binary file per parameter vector. Each binary file is:
//!
//! ```text
//! b"FSPV"  u32 version (=1)  u32 segment_count
//! per segment: u32 name_len, name (UTF-8), u32 rank, rank × u64 dims
//! all values as little-endian f64, segment by segment
//! ```
//!
//! All integers are little-endian.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{ParamVector, Tensor};

use super::GlobalState;

const MAGIC: &[u8; 4] = b"FSPV";
const VERSION: u32 = 1;
const FORMAT_TAG: &str = "fedsim-checkpoint-1";

pub fn encode_params(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.num_segments() as u32).to_le_bytes());
    for (name, t) in params.segments() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("byte {}", self.pos),
                format!("truncated: needed {n} more bytes"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamVector> {
    let mut c = Cursor { path, bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format(path, "byte 0", "not a parameter file"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, "byte 4", format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(path, format!("byte {at}"), "segment name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        header.push((name, shape));
    }
    let mut segments = Vec::with_capacity(count);
    for (name, shape) in header {
        let at = c.pos;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| {
            Error::format(path, format!("byte {at}"), "segment size overflows")
        })?)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, values)
            .map_err(|e| Error::format(path, format!("byte {at}"), e.to_string()))?;
        segments.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, format!("byte {}", c.pos), "trailing bytes"));
    }
    ParamVector::new(segments)
}

/// Global state plus the run identity it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub strategy_digest: String,
    pub seed: u64,
    pub state: GlobalState,
}

fn history_file(i: usize) -> String {
    format!("history_{i}.bin")
}

impl Checkpoint {
    pub fn manifest(&self) -> String {
        let mut m = String::new();
        writeln!(m, "format={FORMAT_TAG}").unwrap();
        writeln!(m, "round={}", self.state.round).unwrap();
        writeln!(m, "seed={}", self.seed).unwrap();
        writeln!(m, "strategy_digest={}", self.strategy_digest).unwrap();
        writeln!(m, "history_len={}", self.state.raw_delta_history.len()).unwrap();
        writeln!(m, "history_capacity={}", self.state.history_capacity).unwrap();
        m
    }

    /// Writes every file atomically; the manifest goes last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("weights.bin"), &encode_params(&self.state.weights))?;
        write_atomic(&dir.join("delta.bin"), &encode_params(&self.state.blended_delta))?;
        for (i, h) in self.state.raw_delta_history.iter().enumerate() {
            write_atomic(&dir.join(history_file(i)), &encode_params(h))?;
        }
        write_atomic(&dir.join("manifest.txt"), self.manifest().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(&manifest_path, format!("line {}", i + 1), "expected key=value")
            })?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |key: &str| -> Result<&String> {
            kv.get(key)
                .ok_or_else(|| Error::format(&manifest_path, "manifest", format!("missing `{key}`")))
        };
        let num = |key: &str| -> Result<u64> {
            get(key)?.parse().map_err(|_| {
                Error::format(&manifest_path, "manifest", format!("`{key}` is not an integer"))
            })
        };
        if get("format")? != FORMAT_TAG {
            return Err(Error::format(&manifest_path, "line 1", "unknown checkpoint format"));
        }
        let read = |name: &str| -> Result<ParamVector> {
            let p: PathBuf = dir.join(name);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            decode_params(&bytes, &p)
        };
        let weights = read("weights.bin")?;
        let blended_delta = read("delta.bin")?;
        let history_len = num("history_len")? as usize;
        let raw_delta_history = (0..history_len)
            .map(|i| read(&history_file(i)))
            .collect::<Result<VecDeque<_>>>()?;
        weights.ensure_congruent(&blended_delta, "checkpoint delta")?;
        for h in &raw_delta_history {
            weights.ensure_congruent(h, "checkpoint history")?;
        }
        Ok(Checkpoint {
            strategy_digest: get("strategy_digest")?.clone(),
            seed: num("seed")?,
            state: GlobalState {
                round: num("round")? as usize,
                weights,
                blended_delta,
                raw_delta_history,
                history_capacity: num("history_capacity")? as usize,
            },
        })
    }
}
