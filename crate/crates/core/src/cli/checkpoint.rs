//! Model checkpoints.
//!
//! Layout (little-endian): magic `UMCK`, version `u16`, a `u32`-prefixed JSON
//! header (model config, head kind, provenance, parameter names and shapes),
//! the parameter values as `f64` in header order, then an optional Adam
//! section: flag `u8`, beta1, beta2, eps as `f64`, step `u64`, and per
//! parameter a presence byte followed by both moments as `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Task};
use crate::numcore::{AdamState, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"UMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Which output head a checkpoint carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Cluster,
    FrameTranscription,
    Seq2Seq,
}

impl HeadKind {
    pub fn of(model: &Model) -> Result<HeadKind> {
        match (model.has_cluster_head(), model.has_frame_head(), model.has_decoder()) {
            (true, false, false) => Ok(HeadKind::Cluster),
            (false, true, false) => Ok(HeadKind::FrameTranscription),
            (false, false, true) => Ok(HeadKind::Seq2Seq),
            _ => Err(Error::InvalidArgument("model must carry exactly one head".into())),
        }
    }

    /// Parameter layout of a model with this head.
    fn reference(self, config: &ModelConfig) -> Result<Model> {
        let base = Model::new(config.clone(), 0)?;
        match self {
            HeadKind::Cluster => Ok(base),
            HeadKind::FrameTranscription => base.with_task_head(Task::FrameTranscription, 0),
            HeadKind::Seq2Seq => base.with_task_head(Task::Seq2Seq, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Hash of the experiment configuration that produced the weights.
    pub config_hash: String,
    pub build: String,
    /// Updates applied in the run that wrote the checkpoint.
    pub step: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, step: u64) -> Self {
        Provenance { config_hash: config_hash.into(), build: build_tag(), step }
    }
}

pub fn build_tag() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    head: HeadKind,
    provenance: Provenance,
    params: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: Option<AdamState>, provenance: Provenance) -> Self {
        Checkpoint { model, optimizer, provenance }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            head: HeadKind::of(&self.model)?,
            provenance: self.provenance.clone(),
            params: self.model.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("serializable");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.model.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.model.params.iter() {
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_f64s(&mut out, &[opt.beta1, opt.beta2, opt.eps]);
                out.extend_from_slice(&opt.step_count().to_le_bytes());
                let slots = opt.moment_slots();
                for (id, _, t) in self.model.params.iter() {
                    match slots.get(id.0).and_then(Option::as_ref) {
                        Some((m, v)) if m.shape() == t.shape() && v.shape() == t.shape() => {
                            out.push(1);
                            put_f64s(&mut out, m.data());
                            put_f64s(&mut out, v.data());
                        }
                        Some(_) => return Err(Error::shape("checkpoint", format!("optimizer moments for parameter {}", id.0))),
                        None => out.push(0),
                    }
                }
            }
        }
        Ok(out)
    }

    /// Parse a checkpoint. `path` is used in error messages only.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let len = u32::from_le_bytes(r.array()?) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, e.to_string()))?;
        header.model.validate()?;
        let reference = header.head.reference(&header.model)?;
        let layout: Vec<(String, Vec<usize>)> = reference.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
        if layout != header.params {
            return Err(Error::format(path, "parameter layout does not match the model configuration"));
        }
        let mut params = ParamStore::new();
        for (name, shape) in &header.params {
            let n = shape.iter().product();
            params.insert(name.clone(), Tensor::new(shape.clone(), r.f64s(n)?)?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let h = r.f64s(3)?;
                let step = u64::from_le_bytes(r.array()?);
                let mut moments = Vec::with_capacity(params.len());
                for (_, _, t) in params.iter() {
                    moments.push(match r.take(1)?[0] {
                        0 => None,
                        1 => {
                            let m = Tensor::new(t.shape().to_vec(), r.f64s(t.len())?)?;
                            let v = Tensor::new(t.shape().to_vec(), r.f64s(t.len())?)?;
                            Some((m, v))
                        }
                        b => return Err(Error::format(path, format!("bad moment flag {b}"))),
                    });
                }
                Some(AdamState::from_parts(h[0], h[1], h[2], step, moments))
            }
            b => return Err(Error::format(path, format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { model: Model { config: header.model, params }, optimizer, provenance: header.provenance })
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint; with `expected`, its model configuration must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes, path)?;
    if let Some(cfg) = expected {
        if *cfg != ck.model.config {
            return Err(Error::Config(format!(
                "checkpoint {} was written for model {:?}, but the configuration asks for {:?}",
                path.display(),
                ck.model.config,
                cfg
            )));
        }
    }
    Ok(ck)
}
