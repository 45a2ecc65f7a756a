//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LMFT-CKP"                      8 bytes
//! version                         u32
//! metadata length                 u64
//! metadata                        JSON
//! entry count                     u32
//! per entry: name length u32, name, dtype u8 (0 = f32, 1 = f64, 2 = u8),
//!            rank u32, dims u64 × rank, offset u64, byte length u64
//! payload                         offsets are relative to its start
//! SHA-256 of everything above     32 bytes
//! ```
//!
//! The vocabulary file used by the model is stored as a `u8` entry so a
//! checkpoint is self-contained.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::awd_lstm::{AwdLstm, LMConfig, ModelError};
use crate::classifier::{HeadConfig, TextClassifier};
use crate::corpus::TaskKind;
use crate::tokenizer::UnigramVocab;
use crate::training::{Ranger, Stage};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LMFT-CKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const VOCAB_ENTRY: &str = "vocab";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint format version {found} is not supported (this build reads version {supported}); re-save it with a matching release")]
    Version { found: u32, supported: u32 },
    #[error("corrupt checkpoint at byte {offset}: {message}")]
    Corrupt { offset: usize, message: String },
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// A named array with its raw little-endian bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F32,
            shape: t.shape().to_vec(),
            bytes: t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn to_f32(&self) -> Result<Tensor<f32>, PersistError> {
        if self.dtype != DType::F32 {
            return Err(PersistError::Compatibility(format!("entry {} is not f32", self.name)));
        }
        let data = self
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(self.shape.clone(), data)
            .map_err(|e| PersistError::Compatibility(format!("entry {}: {e}", self.name)))
    }
}

/// Everything about a model except its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub lm_config: LMConfig,
    /// SHA-256 hex digest of the vocabulary file.
    pub vocab_hash: String,
    pub head: Option<HeadMeta>,
    /// Per-parameter optimizer step counts, when optimizer state is stored.
    pub optimizer_steps: Option<BTreeMap<String, u64>>,
    /// Free-form run information (configuration, metrics).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub config: HeadConfig,
    pub task_kind: TaskKind,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
}

fn store_entries(store: &ParamStore<f32>) -> Vec<Entry> {
    store
        .ids()
        .map(|id| Entry::from_f32(format!("param/{}", store.name(id)), store.value(id)))
        .collect()
}

impl Checkpoint {
    fn with_store(meta: CheckpointMeta, store: &ParamStore<f32>, vocab: &UnigramVocab) -> Self {
        let mut entries = store_entries(store);
        entries.push(Entry {
            name: VOCAB_ENTRY.into(),
            dtype: DType::U8,
            shape: vec![0],
            bytes: vocab.to_bytes(),
        });
        let n = entries.last().unwrap().bytes.len();
        entries.last_mut().unwrap().shape = vec![n];
        Self { meta, entries }
    }

    pub fn from_lm(model: &AwdLstm<f32>, vocab: &UnigramVocab, stage: Stage) -> Self {
        let meta = CheckpointMeta {
            stage,
            lm_config: model.config().clone(),
            vocab_hash: vocab.content_hash(),
            head: None,
            optimizer_steps: None,
            extra: serde_json::Value::Null,
        };
        Self::with_store(meta, model.store(), vocab)
    }

    pub fn from_classifier(clf: &TextClassifier<f32>, vocab: &UnigramVocab) -> Self {
        let meta = CheckpointMeta {
            stage: Stage::ClfFinetune,
            lm_config: clf.lm().config().clone(),
            vocab_hash: vocab.content_hash(),
            head: Some(HeadMeta {
                config: *clf.head_config(),
                task_kind: clf.task_kind(),
                labels: clf.labels().to_vec(),
            }),
            optimizer_steps: None,
            extra: serde_json::Value::Null,
        };
        Self::with_store(meta, clf.store(), vocab)
    }

    /// Adds optimizer moments and slow weights for every stepped parameter.
    pub fn add_optimizer(&mut self, opt: &Ranger<f32>, store: &ParamStore<f32>) {
        let mut steps = BTreeMap::new();
        for id in store.ids() {
            if let Some(s) = opt.state(id) {
                let name = store.name(id);
                steps.insert(name.to_string(), s.step);
                self.entries.push(Entry::from_f32(format!("optim.m/{name}"), &s.m));
                self.entries.push(Entry::from_f32(format!("optim.v/{name}"), &s.v));
                self.entries.push(Entry::from_f32(format!("optim.slow/{name}"), &s.slow));
            }
        }
        self.meta.optimizer_steps = Some(steps);
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// The embedded vocabulary.
    pub fn vocab(&self) -> Result<UnigramVocab, PersistError> {
        let e = self
            .entry(VOCAB_ENTRY)
            .ok_or_else(|| PersistError::Compatibility("checkpoint carries no vocabulary".into()))?;
        let vocab = UnigramVocab::from_bytes(&e.bytes)
            .map_err(|err| PersistError::Compatibility(format!("embedded vocabulary: {err}")))?;
        self.verify_vocab(&vocab)?;
        Ok(vocab)
    }

    /// Refuses a vocabulary whose content digest differs from the one the
    /// model was trained with.
    pub fn verify_vocab(&self, vocab: &UnigramVocab) -> Result<(), PersistError> {
        let hash = vocab.content_hash();
        if hash != self.meta.vocab_hash {
            return Err(PersistError::Compatibility(format!(
                "vocabulary hash {hash} does not match checkpoint vocabulary {}",
                self.meta.vocab_hash
            )));
        }
        Ok(())
    }

    fn param_store(&self) -> Result<ParamStore<f32>, PersistError> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            if let Some(name) = e.name.strip_prefix("param/") {
                store.add(name, e.to_f32()?);
            }
        }
        Ok(store)
    }

    /// Rebuilds the language model; parameter shapes are checked against the
    /// stored configuration. A classifier checkpoint yields its encoder.
    pub fn to_lm(&self) -> Result<AwdLstm<f32>, PersistError> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            if let Some(name) = e.name.strip_prefix("param/") {
                if !name.starts_with("head.") {
                    store.add(name, e.to_f32()?);
                }
            }
        }
        Ok(AwdLstm::from_store(self.meta.lm_config.clone(), store)?)
    }

    pub fn to_classifier(&self) -> Result<TextClassifier<f32>, PersistError> {
        let head = self
            .meta
            .head
            .as_ref()
            .ok_or_else(|| PersistError::Compatibility("checkpoint has no classifier head".into()))?;
        Ok(TextClassifier::from_store(
            self.meta.lm_config.clone(),
            self.param_store()?,
            head.config,
            head.task_kind,
            head.labels.clone(),
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.bytes.len() as u64).to_le_bytes());
            offset += e.bytes.len() as u64;
        }
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(PersistError::Magic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PersistError::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let meta_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| PersistError::Corrupt {
            offset: meta_at,
            message: format!("metadata: {e}"),
        })?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| PersistError::Corrupt {
                offset: at,
                message: "entry name is not UTF-8".into(),
            })?;
            let code_at = r.pos;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| PersistError::Corrupt {
                offset: code_at,
                message: "unknown dtype".into(),
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            let nbytes = r.u64()? as usize;
            let expected = shape.iter().try_fold(dtype.width(), |acc, &d| acc.checked_mul(d));
            if expected != Some(nbytes) {
                return Err(PersistError::Corrupt {
                    offset: at,
                    message: format!("entry {name}: {nbytes} bytes do not match shape {shape:?}"),
                });
            }
            dir.push((name, dtype, shape, offset, nbytes));
        }
        let payload_at = r.pos;
        let payload_len: usize = dir.iter().map(|d| d.4).sum();
        let payload = r.take(payload_len)?;
        let digest_at = r.pos;
        let stored = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(PersistError::Corrupt {
                offset: r.pos,
                message: "trailing bytes after digest".into(),
            });
        }
        if Sha256::digest(&bytes[..digest_at]).as_slice() != stored {
            return Err(PersistError::Corrupt {
                offset: digest_at,
                message: "content digest mismatch".into(),
            });
        }
        let mut entries = Vec::with_capacity(dir.len());
        for (name, dtype, shape, offset, nbytes) in dir {
            let end = offset.checked_add(nbytes).filter(|&e| e <= payload.len()).ok_or_else(|| {
                PersistError::Corrupt {
                    offset: payload_at + offset.min(payload.len()),
                    message: format!("entry {name} points outside the payload"),
                }
            })?;
            entries.push(Entry {
                name,
                dtype,
                shape,
                bytes: payload[offset..end].to_vec(),
            });
        }
        Ok(Self { meta, entries })
    }

    /// Atomic write: a temporary file in the target directory is renamed
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<(), PersistError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let bytes = std::fs::read(path).map_err(|source| PersistError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Restores optimizer state saved by [`Checkpoint::add_optimizer`].
    pub fn optimizer_state(&self, store: &ParamStore<f32>) -> Result<Vec<(ParamId, u64, [Tensor<f32>; 3])>, PersistError> {
        let Some(steps) = &self.meta.optimizer_steps else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for (name, &step) in steps {
            let id = store
                .find(name)
                .ok_or_else(|| PersistError::Compatibility(format!("optimizer state for unknown parameter {name}")))?;
            let get = |kind: &str| {
                self.entry(&format!("optim.{kind}/{name}"))
                    .ok_or_else(|| PersistError::Compatibility(format!("missing optim.{kind} for {name}")))
                    .and_then(Entry::to_f32)
            };
            out.push((id, step, [get("m")?, get("v")?, get("slow")?]));
        }
        Ok(out)
    }
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let io = |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(PersistError::Corrupt {
            offset: self.pos,
            message: format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PersistError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
