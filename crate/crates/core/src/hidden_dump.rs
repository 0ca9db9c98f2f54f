//! `MTAD1` binary dump of per-layer hidden states.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic     5 bytes  "MTAD1"
//! version   u32      1
//! n_states  u32      hidden states per token (n_layers + 1)
//! d_model   u32
//! vocab     u32
//! n_samples u64
//! per sample:
//!   seq_len u32
//!   ids     seq_len x u32
//!   padding seq_len x u8 (1 = padded)
//!   states  n_states x seq_len x d_model x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MTAD1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DumpHeader {
    pub n_states: usize,
    pub d_model: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpRecord {
    pub ids: Vec<u32>,
    pub padding_mask: Vec<bool>,
    /// `n_states` arrays of `seq_len * d_model`.
    pub states: Vec<Vec<f32>>,
}

impl DumpRecord {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenDump {
    pub header: DumpHeader,
    pub records: Vec<DumpRecord>,
}

impl HiddenDump {
    fn check(&self) -> Result<()> {
        let h = &self.header;
        for (i, r) in self.records.iter().enumerate() {
            let bad = r.padding_mask.len() != r.seq_len()
                || r.states.len() != h.n_states
                || r.states.iter().any(|s| s.len() != r.seq_len() * h.d_model);
            if bad {
                return Err(Error::invalid("HiddenDump", format!("record {i} does not match header")));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.check()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let h = &self.header;
        w.write_all(MAGIC).map_err(io)?;
        for v in [VERSION, h.n_states as u32, h.d_model as u32, h.vocab_size as u32] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(self.records.len() as u64).to_le_bytes()).map_err(io)?;
        for r in &self.records {
            w.write_all(&(r.seq_len() as u32).to_le_bytes()).map_err(io)?;
            for id in &r.ids {
                w.write_all(&id.to_le_bytes()).map_err(io)?;
            }
            for &p in &r.padding_mask {
                w.write_all(&[p as u8]).map_err(io)?;
            }
            for layer in &r.states {
                for x in layer {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
            offset: 0,
        };
        let magic = r.bytes(5, "magic")?;
        if magic != MAGIC {
            return Err(r.corrupt(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.corrupt(5, &format!("unsupported version {version}")));
        }
        let header = DumpHeader {
            n_states: r.u32("n_states")? as usize,
            d_model: r.u32("d_model")? as usize,
            vocab_size: r.u32("vocab")? as usize,
        };
        let n = r.u64("n_samples")?;
        let mut records = Vec::new();
        for _ in 0..n {
            let seq = r.u32("seq_len")? as usize;
            let mut ids = Vec::with_capacity(seq);
            for _ in 0..seq {
                let at = r.offset;
                let id = r.u32("token id")?;
                if id as usize >= header.vocab_size {
                    return Err(r.corrupt(at, &format!("token id {id} >= vocab {}", header.vocab_size)));
                }
                ids.push(id);
            }
            let mut padding_mask = Vec::with_capacity(seq);
            for b in r.bytes(seq, "padding mask")? {
                padding_mask.push(match b {
                    0 => false,
                    1 => true,
                    _ => return Err(r.corrupt(r.offset, &format!("padding byte {b}"))),
                });
            }
            let mut states = Vec::with_capacity(header.n_states);
            for _ in 0..header.n_states {
                let raw = r.bytes(seq * header.d_model * 4, "states")?;
                states.push(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                );
            }
            records.push(DumpRecord {
                ids,
                padding_mask,
                states,
            });
        }
        let mut rest = Vec::new();
        r.inner.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(r.corrupt(r.offset, &format!("{} trailing bytes", rest.len())));
        }
        Ok(HiddenDump { header, records })
    }
}

struct Reader {
    inner: BufReader<File>,
    path: PathBuf,
    offset: u64,
}

impl Reader {
    fn corrupt(&self, offset: u64, msg: &str) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.corrupt(self.offset, &format!("truncated in {what}")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(&b);
        Ok(u64::from_le_bytes(a))
    }
}
