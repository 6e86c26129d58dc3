//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     b"D3CK"
//! version   u32
//! step      u64
//! meta_len  u32, then meta_len bytes of UTF-8 `key=value` lines
//!           (network config plus kind/task/projection/seed)
//! count     u32 tensors, each:
//!     name_len u32, name bytes, dims 4 x u32, dims product x f32
//! checksum  u64 FNV-1a over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::{parse_kv, NetworkConfig};
use super::heads::ProjectionMode;
use super::predictor::{PredictorState, Teacher};
use crate::error::{Error, Result};
use crate::nn::{Fnv, ParamStore};
use crate::task::Task;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"D3CK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Raw checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub step: u64,
    pub meta: String,
    pub params: ParamStore,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut h = Fnv::new();
        h.write(&out);
        out.extend_from_slice(&h.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {magic:?}, expected {:?}", "D3CK"),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len() as u64, "file too short"));
        }
        let body_len = bytes.len() - 8;
        let mut h = Fnv::new();
        h.write(&bytes[..body_len]);
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        if stored != h.finish() {
            return Err(Error::format(
                body_len as u64,
                "checksum mismatch (file truncated or corrupted)",
            ));
        }
        let r_bytes = &bytes[..body_len];
        let mut r = Reader {
            bytes: r_bytes,
            pos: r.pos,
        };
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::format(meta_at as u64, "metadata is not UTF-8"))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?;
            if params.find(&name).is_some() {
                return Err(Error::format(at as u64, format!("duplicate tensor {name}")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let n: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::format(at as u64, "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != r_bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after tensors"));
        }
        Ok(Self {
            version,
            step,
            meta,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!("unexpected end of file reading {n} bytes"),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("checkpoint metadata is missing {key}")))
}

pub fn save_teacher(teacher: &Teacher, step: u64, path: &Path) -> Result<()> {
    let meta = format!("kind=teacher\n{}", teacher.config().to_text());
    Container {
        version: CHECKPOINT_VERSION,
        step,
        meta,
        params: teacher.params().clone(),
    }
    .write(path)
}

/// Returns the teacher and its training step counter.
pub fn load_teacher(path: &Path) -> Result<(Teacher, u64)> {
    let c = Container::read(path)?;
    let (config, meta) = NetworkConfig::from_text(&c.meta)?;
    if meta_get(&meta, "kind")? != "teacher" {
        return Err(Error::Config(format!(
            "{} is not a teacher checkpoint",
            path.display()
        )));
    }
    Ok((Teacher::from_parts(config, c.params)?, c.step))
}

pub fn save_checkpoint(state: &PredictorState, path: &Path) -> Result<()> {
    let meta = format!(
        "kind=student\ntask={}\nprojection={}\nseed={}\n{}",
        state.task(),
        state.projection(),
        state.seed,
        state.config().to_text()
    );
    Container {
        version: CHECKPOINT_VERSION,
        step: state.step,
        meta,
        params: state.params().clone(),
    }
    .write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<PredictorState> {
    let c = Container::read(path)?;
    let (config, meta) = NetworkConfig::from_text(&c.meta)?;
    if meta_get(&meta, "kind")? != "student" {
        return Err(Error::Config(format!(
            "{} is not a student checkpoint",
            path.display()
        )));
    }
    let task: Task = meta_get(&meta, "task")?.parse()?;
    let projection: ProjectionMode = meta_get(&meta, "projection")?.parse()?;
    let seed = meta_get(&meta, "seed")?
        .parse::<u64>()
        .map_err(|_| Error::Config("checkpoint seed is not an integer".into()))?;
    PredictorState::from_parts(config, task, projection, seed, c.step, c.params)
}

/// [`load_checkpoint`], additionally requiring the checkpoint to predict `task`.
pub fn load_checkpoint_for(path: &Path, task: Task) -> Result<PredictorState> {
    let state = load_checkpoint(path)?;
    if state.task() != task {
        return Err(Error::Config(format!(
            "checkpoint predicts {} ({} channels) but {task} ({} channels) was requested",
            state.task(),
            state.task().output_channels(),
            task.output_channels()
        )));
    }
    Ok(state)
}

/// Parse only the metadata block of a checkpoint.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_kv(&Container::read(path)?.meta)
}
