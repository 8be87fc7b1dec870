//! Binary checkpoint format.
//!
//! ```text
//! "TAGVCKPT"  u32 version
//! u32 len, config text (key = value lines)
//! u32 count, count × (u16 len, token)            vocabulary in id order
//! u32 count, count × (u16 len, name, u32 rank, rank × u32 dim, f32 data…)
//! u8 has_state, [u32 count, count × (u16 len, name, u64 step, f32 m…, f32 v…)]
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use tagv_tensor::{AdamState, ParamStore, Tensor};

use crate::config::TrainConfig;
use crate::error::{io_err, CoreError, Result};
use crate::model::expected_shapes;
use crate::spanpred::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TAGVCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.b.len() - self.at < n {
            return Err(CoreError::CkptTruncated(what));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn name(&mut self, what: &'static str) -> Result<String> {
        let n = self.u16(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CoreError::Invalid(format!("non-UTF-8 {what}")))
    }

    fn floats(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(CoreError::CkptTruncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_name(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| CoreError::Invalid(format!("name too long: {s}")))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_floats(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in self.vocab.tokens() {
            put_name(&mut out, t)?;
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_name(&mut out, name)?;
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        let states: Vec<_> = self.params.names().filter_map(|n| self.params.state(n).map(|s| (n, s))).collect();
        if states.is_empty() {
            out.push(0);
        } else {
            out.push(1);
            out.extend_from_slice(&(states.len() as u32).to_le_bytes());
            for (name, st) in states {
                put_name(&mut out, name)?;
                out.extend_from_slice(&st.step.to_le_bytes());
                put_floats(&mut out, &st.m);
                put_floats(&mut out, &st.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < MAGIC.len() || &b[..MAGIC.len()] != MAGIC {
            return Err(CoreError::CkptMagic);
        }
        let mut r = Reader { b, at: MAGIC.len() };
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::CkptVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let n = r.u32("config")? as usize;
        let text = std::str::from_utf8(r.take(n, "config")?)
            .map_err(|_| CoreError::Invalid("config snapshot is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)?;

        let n = r.u32("vocabulary")? as usize;
        let tokens = (0..n).map(|_| r.name("vocabulary")).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens)?;

        let mut params = ParamStore::new();
        let n = r.u32("tensor count")? as usize;
        for _ in 0..n {
            let name = r.name("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let dims = (0..rank).map(|_| Ok(r.u32("tensor dims")? as usize)).collect::<Result<Vec<_>>>()?;
            let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CoreError::CkptTruncated("tensor data"))?;
            let data = r.floats(len, "tensor data")?;
            params.insert(name, Tensor::new(dims, data)?)?;
        }
        let expected = expected_shapes(&config, vocab.len());
        let got: std::collections::BTreeMap<String, Vec<usize>> =
            params.iter().map(|(n, t)| (n.to_string(), t.dims().to_vec())).collect();
        if got != expected {
            return Err(CoreError::Incompatible(
                "tensor names or shapes do not match the stored configuration".into(),
            ));
        }

        if r.u8("optimizer flag")? == 1 {
            let n = r.u32("optimizer state")? as usize;
            for _ in 0..n {
                let name = r.name("optimizer state")?;
                let len = params.get(&name)?.len();
                let step = r.u64("optimizer state")?;
                let m = r.floats(len, "optimizer state")?;
                let v = r.floats(len, "optimizer state")?;
                params.set_state(&name, AdamState { m, v, step })?;
            }
        }
        if r.at != b.len() {
            return Err(CoreError::Invalid(format!("{} trailing bytes after checkpoint", b.len() - r.at)));
        }
        Ok(Self { config, vocab, params })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ck.to_bytes()?).map_err(io_err(path))
}

/// Reads a checkpoint; when `expected` is given, its configuration must
/// equal the stored snapshot.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ck = Checkpoint::from_bytes(&std::fs::read(path).map_err(io_err(path))?)?;
    if let Some(cfg) = expected {
        let diff = cfg.diff(&ck.config);
        if !diff.is_empty() {
            return Err(CoreError::Incompatible(diff.join(", ")));
        }
    }
    Ok(ck)
}
