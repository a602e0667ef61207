//! Binary run checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CTRNCKPT" | u32 version | u64 meta length | meta JSON
//! u32 tensor count | per tensor: u32 name length, name, u32 ndim, u64 dims...
//! f64 payload for every tensor in table order
//! SHA-256 of everything above (32 bytes)
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunConfig, RunMetrics, Trainer};
use crate::data::{Corpus, Cursor};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, ModelParams};
use crate::optim::InnerOptState;

pub const MAGIC: &[u8; 8] = b"CTRNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub cursor: Cursor,
    pub rng: ChaCha8Rng,
    pub opt_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub step: usize,
    pub tokens: u64,
    pub sim_comm_s: f64,
    pub sim_comp_s: f64,
    pub nodes: Vec<NodeMeta>,
    pub ddp_opt_step: Option<u64>,
    pub train_fingerprint: String,
    pub eval_fingerprint: String,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// SHA-256 over a corpus' header and tokens, hex encoded.
pub fn corpus_fingerprint(c: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update((c.vocab_size as u64).to_le_bytes());
    h.update((c.seq_len as u64).to_le_bytes());
    for t in c.tokens() {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn encode(meta: &CheckpointMeta, tensors: &[TensorEntry]) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let n: u64 = t.shape.iter().product();
        if n as usize != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err("file too short".into());
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch (file corrupt or truncated)".into());
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version} (expected {VERSION})"));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        table.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n = shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .ok_or("shape overflows")? as usize;
        let raw = r.take(n.checked_mul(8).ok_or("shape overflows")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(TensorEntry { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - r.pos));
    }
    Ok(Checkpoint { version, meta, tensors })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn split_like(flat: &[f64], like: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    if flat.len() != like.iter().map(Vec::len).sum::<usize>() {
        return None;
    }
    let mut out = Vec::with_capacity(like.len());
    let mut i = 0;
    for l in like {
        out.push(flat[i..i + l.len()].to_vec());
        i += l.len();
    }
    Some(out)
}

fn vector(name: String, data: Vec<f64>) -> TensorEntry {
    TensorEntry {
        name,
        shape: vec![data.len() as u64],
        data,
    }
}

fn opt_tensors(prefix: &str, s: &InnerOptState, out: &mut Vec<TensorEntry>) {
    out.push(vector(format!("{prefix}/m"), flat(s.first_moment())));
    out.push(vector(format!("{prefix}/v"), flat(s.second_moment())));
}

impl Trainer {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let layout = self.model.layout();
        let mut tensors = Vec::new();
        for spec in layout.tensors() {
            tensors.push(TensorEntry {
                name: format!("global/{}", spec.label()),
                shape: vec![spec.rows as u64, spec.cols as u64],
                data: self.global.tensor(spec).to_vec(),
            });
        }
        tensors.push(vector("outer/momentum".into(), self.outer.momentum.clone()));
        if let Some(s) = &self.ddp_opt {
            opt_tensors("ddp", s, &mut tensors);
        }
        for n in &self.nodes {
            if let Some(s) = &n.opt {
                tensors.push(vector(format!("node{}/params", n.id), n.params.values.clone()));
                opt_tensors(&format!("node{}", n.id), s, &mut tensors);
            }
        }
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            run: self.run.clone(),
            step: self.step,
            tokens: self.tokens,
            sim_comm_s: self.sim_comm_s,
            sim_comp_s: self.sim_comp_s,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeMeta {
                    cursor: n.cursor,
                    rng: n.rng.clone(),
                    opt_step: n.opt.as_ref().map(InnerOptState::step),
                })
                .collect(),
            ddp_opt_step: self.ddp_opt.as_ref().map(InnerOptState::step),
            train_fingerprint: corpus_fingerprint(&self.train),
            eval_fingerprint: corpus_fingerprint(&self.eval),
            metrics: self.metrics.clone(),
        };
        Checkpoint {
            version: VERSION,
            meta,
            tensors,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = self.to_checkpoint();
        write_atomic(path, &encode(&ck.meta, &ck.tensors)?)
    }

    /// Rebuilds a trainer from a checkpoint. The corpora must be the ones the
    /// run was started with.
    pub fn from_checkpoint(
        ck: Checkpoint,
        train: Arc<Corpus>,
        eval: Arc<Corpus>,
        threads: usize,
    ) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: PathBuf::new(),
            reason,
        };
        if corpus_fingerprint(&train) != ck.meta.train_fingerprint
            || corpus_fingerprint(&eval) != ck.meta.eval_fingerprint
        {
            return Err(bad("corpus does not match the one the run was started with".into()));
        }
        let meta = ck.meta;
        let mut t = Trainer::new(meta.model.clone(), meta.run.clone(), train, eval, threads)?;
        if meta.nodes.len() != t.nodes.len() {
            return Err(bad("node count mismatch".into()));
        }
        let get = |name: &str| -> Result<&TensorEntry> {
            ck.tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let layout = t.model.layout().clone();
        let mut global = ModelParams::zeros(&layout);
        for spec in layout.tensors() {
            let e = get(&format!("global/{}", spec.label()))?;
            if e.data.len() != spec.len() {
                return Err(bad(format!("tensor {} has the wrong size", e.name)));
            }
            global.values[spec.range()].copy_from_slice(&e.data);
        }
        t.global = global;
        let mom = get("outer/momentum")?;
        if mom.data.len() != layout.len() {
            return Err(bad("outer momentum has the wrong size".into()));
        }
        t.outer.momentum = mom.data.clone();

        let restore = |prefix: &str, s: &mut InnerOptState, step: Option<u64>| -> Result<()> {
            let m = split_like(&get(&format!("{prefix}/m"))?.data, s.first_moment())
                .ok_or_else(|| bad(format!("{prefix}/m has the wrong size")))?;
            let v = split_like(&get(&format!("{prefix}/v"))?.data, s.second_moment())
                .ok_or_else(|| bad(format!("{prefix}/v has the wrong size")))?;
            s.restore(m, v, step.ok_or_else(|| bad(format!("{prefix}: missing step")))?)
        };
        if let Some(s) = t.ddp_opt.as_mut() {
            restore("ddp", s, meta.ddp_opt_step)?;
        }
        for (n, nm) in t.nodes.iter_mut().zip(&meta.nodes) {
            n.cursor = nm.cursor;
            n.rng = nm.rng.clone();
            if let Some(s) = n.opt.as_mut() {
                restore(&format!("node{}", n.id), s, nm.opt_step)?;
                let p = get(&format!("node{}/params", n.id))?;
                if p.data.len() != layout.len() {
                    return Err(bad(format!("node{}/params has the wrong size", n.id)));
                }
                n.params.values = p.data.clone();
            } else {
                n.params = t.global.clone();
            }
        }
        t.step = meta.step;
        t.tokens = meta.tokens;
        t.sim_comm_s = meta.sim_comm_s;
        t.sim_comp_s = meta.sim_comp_s;
        t.metrics = meta.metrics;
        Ok(t)
    }

    pub fn load_checkpoint(path: &Path, train: Arc<Corpus>, eval: Arc<Corpus>, threads: usize) -> Result<Self> {
        let ck = read(path)?;
        Self::from_checkpoint(ck, train, eval, threads).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}
