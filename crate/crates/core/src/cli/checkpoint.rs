//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "GR2NCKPT"
//! version    u32
//! topology   u64 length + UTF-8 TOML of the model spec
//! params     tensor list (the best-validation parameters)
//! norm       u8 flag; if 1: u64 C, C × (mean f64, std f64), u8 flag + target (mean, std)
//! state      u8 flag; if 1: epoch u64, best flag u8 (+ epoch u64, metric f64),
//!            current params, adam step u64, first moments, second moments,
//!            rng seed 32 bytes, stream u64, word position u128
//! ```
//!
//! A tensor list is a u64 count followed by, per tensor, a u64-prefixed
//! UTF-8 name, three u64 dimensions (batch, channels, time) and the f64
//! values in row-major order. Nothing may follow the last section.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{ChannelStats, Normalization};
use crate::model::{Model, ModelSpec};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor3};
use crate::train::{AdamState, Best, TrainState};

pub const MAGIC: &[u8; 8] = b"GR2NCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}")]
    Truncated { needed: usize, offset: usize },
    #[error("{0} unexpected bytes after the end of the checkpoint")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub normalization: Option<Normalization>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(model: &Model, normalization: Option<Normalization>, state: Option<TrainState>) -> Self {
        Checkpoint { spec: model.spec().clone(), params: model.params().clone(), normalization, state }
    }

    /// Rebuilds the model from the stored topology and parameters.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(self.spec.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        m.load_params(self.params.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let topo = toml::to_string(&self.spec).expect("model spec serializes");
        put_bytes(&mut w, topo.as_bytes());
        put_store(&mut w, &self.params);
        match &self.normalization {
            None => w.push(0),
            Some(n) => {
                w.push(1);
                put_u64(&mut w, n.features.len() as u64);
                for s in &n.features {
                    put_stats(&mut w, s);
                }
                match &n.target {
                    None => w.push(0),
                    Some(t) => {
                        w.push(1);
                        put_stats(&mut w, t);
                    }
                }
            }
        }
        match &self.state {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                put_u64(&mut w, s.epoch as u64);
                match &s.best {
                    None => w.push(0),
                    Some(b) => {
                        w.push(1);
                        put_u64(&mut w, b.epoch as u64);
                        put_f64(&mut w, b.metric);
                    }
                }
                put_store(&mut w, &s.current);
                put_u64(&mut w, s.adam.steps());
                put_tensors(&mut w, s.current.names(), s.adam.first_moments());
                put_tensors(&mut w, s.current.names(), s.adam.second_moments());
                w.extend_from_slice(&s.rng.get_seed());
                put_u64(&mut w, s.rng.get_stream());
                w.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let topo = r.string()?;
        let spec: ModelSpec = toml::from_str(&topo).map_err(|e| CheckpointError::Malformed(format!("topology: {e}")))?;
        let params = r.store()?;
        let normalization = match r.flag()? {
            false => None,
            true => {
                let c = r.len()?;
                let features = (0..c).map(|_| r.stats()).collect::<Result<Vec<_>>>()?;
                let target = if r.flag()? { Some(r.stats()?) } else { None };
                Some(Normalization { features, target })
            }
        };
        let state = match r.flag()? {
            false => None,
            true => {
                let epoch = r.u64()? as usize;
                let best = if r.flag()? {
                    Some(Best { epoch: r.u64()? as usize, metric: r.f64()?, params: params.clone() })
                } else {
                    None
                };
                let current = r.store()?;
                let steps = r.u64()?;
                let m = r.store()?;
                let v = r.store()?;
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(word_pos);
                let adam = AdamState::from_parts(steps, m.tensors().to_vec(), v.tensors().to_vec());
                Some(TrainState { epoch, current, adam, rng, best })
            }
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let ckpt = Checkpoint { spec, params, normalization, state };
        ckpt.model()?;
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file first, so a failed save never
    /// leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

fn put_stats(w: &mut Vec<u8>, s: &ChannelStats) {
    put_f64(w, s.mean);
    put_f64(w, s.std);
}

fn put_tensors(w: &mut Vec<u8>, names: &[String], tensors: &[Tensor3]) {
    put_u64(w, tensors.len() as u64);
    for (name, t) in names.iter().zip(tensors) {
        put_bytes(w, name.as_bytes());
        let s = t.shape();
        for d in [s.batch, s.channels, s.time] {
            put_u64(w, d as u64);
        }
        for v in t.data() {
            put_f64(w, *v);
        }
    }
}

fn put_store(w: &mut Vec<u8>, store: &ParamStore) {
    put_tensors(w, store.names(), store.tensors());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { needed: n, offset: self.pos }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CheckpointError::Malformed(format!("flag byte {b} at offset {}", self.pos - 1))),
        }
    }

    /// A count or length, bounded by the bytes that remain.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(CheckpointError::Truncated { needed: n as usize, offset: self.pos });
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }

    fn stats(&mut self) -> Result<ChannelStats> {
        Ok(ChannelStats { mean: self.f64()?, std: self.f64()? })
    }

    fn store(&mut self) -> Result<ParamStore> {
        let count = self.len()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = self.string()?;
            let dims = [self.len()?, self.len()?, self.len()?];
            let shape = Shape::new(dims[0], dims[1], dims[2]);
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n.checked_mul(8).is_some());
            let n = n.ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
            let raw = self.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor3::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
            store.add(name, t);
        }
        Ok(store)
    }
}
