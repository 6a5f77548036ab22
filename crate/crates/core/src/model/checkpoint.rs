//! Binary checkpoint: magic, format version, a JSON header holding the
//! config, run metadata and a tensor directory, then little-endian f64 data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Model, ModelConfig, Parameters, Task};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CURLMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Caller-defined run state (step, RNG position, curriculum state).
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Vec<f64>>,
    pub optimizers: BTreeMap<Task, AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    optimizer_steps: BTreeMap<Task, u64>,
    tensors: Vec<Entry>,
}

fn moment_name(task: Task, which: &str, i: usize) -> String {
    format!("optim.{task}.{which}.{i}")
}

impl Checkpoint {
    pub fn new(model: &Model, meta: serde_json::Value) -> Self {
        Self {
            config: model.config().clone(),
            meta,
            tensors: model.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect(),
            optimizers: BTreeMap::new(),
        }
    }

    pub fn with_optimizers(mut self, optimizers: &BTreeMap<Task, AdamState>) -> Self {
        self.optimizers = optimizers.clone();
        self
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_tensors(self.config.clone(), &self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut all: Vec<(String, &[f64])> = self.tensors.iter().map(|(n, t)| (n.clone(), t.as_slice())).collect();
        for (task, st) in &self.optimizers {
            for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                all.push((moment_name(*task, "m", i), m));
                all.push((moment_name(*task, "v", i), v));
            }
        }
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            optimizer_steps: self.optimizers.iter().map(|(k, s)| (*k, s.t)).collect(),
            tensors: all
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    len: t.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let data_len: usize = all.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + data_len);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &all {
            for v in *t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic: not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + json_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut data = &bytes[20 + json_len..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n = e.len * 8;
            if data.len() < n {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n..];
            tensors.insert(e.name.clone(), values);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let mut optimizers = BTreeMap::new();
        for (task, t) in header.optimizer_steps {
            let mut st = AdamState {
                t,
                m: Vec::new(),
                v: Vec::new(),
            };
            for i in 0.. {
                match (
                    tensors.remove(&moment_name(task, "m", i)),
                    tensors.remove(&moment_name(task, "v", i)),
                ) {
                    (Some(m), Some(v)) => {
                        st.m.push(m);
                        st.v.push(v);
                    }
                    (None, None) => break,
                    _ => return Err(bad("unpaired optimizer moments")),
                }
            }
            optimizers.insert(task, st);
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
            optimizers,
        })
    }

    /// Writes via a temporary file and rename so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
