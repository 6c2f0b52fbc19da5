use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{decode_tensor, encode_tensor_into, encoded_len};
use crate::diffcore::{Adam, ParamStore, Precision, Real, Tensor};
use crate::error::{Error, Result};
use crate::hypernet::{EmbeddingSource, HyperConfig, MrheMode};
use crate::model::NvdArch;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointMode {
    /// Hypernetwork (and learnable embeddings).
    Meta,
    /// A directly trained model.
    Nvd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub mode: CheckpointMode,
    pub precision: Precision,
    pub iteration: u64,
    pub pretrained: bool,
    pub arch: NvdArch,
    pub hyper: Option<HyperConfig>,
    pub mrhe: MrheMode,
    pub embedding: EmbeddingSource,
    pub video_ids: Vec<String>,
    pub config: TrainConfig,
    pub config_digest: String,
    pub trainable: Vec<bool>,
}

/// Everything needed to resume or reuse a run.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub header: CheckpointHeader,
    pub params: ParamStore<S>,
    pub adam: Adam<S>,
    /// Fixed (non-learnable) embeddings by video id.
    pub embeddings: Vec<(String, Tensor<f64>)>,
}

/// Hex sha256 of the canonical JSON form of a config.
pub fn config_digest(config: &TrainConfig) -> Result<String> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    Ok(hex(&Sha256::digest(&json)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha256 of a file's full contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl<S: Real> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.trainable = self.params.iter().map(|(_, n)| n.trainable).collect();
        let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

        // Payloads are encoded straight into the output: a checkpoint of the
        // default hypernetwork is several hundred megabytes.
        let (m, v) = self.adam.moments();
        let lrs: Vec<f64> = self.params.ids().map(|id| self.adam.lr(id)).collect();
        let lrs = Tensor::new([lrs.len()], lrs)?;
        let hyper = vec![self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.step_count() as f64];
        let hyper = Tensor::new([4], hyper)?;
        let mut entries: Vec<(String, Entry<'_, S>)> = Vec::new();
        for (id, node) in self.params.iter() {
            entries.push((format!("param/{}", node.name), Entry::Real(node.value)));
            entries.push((format!("adam.m/{}", node.name), Entry::Real(&m[id.0])));
            entries.push((format!("adam.v/{}", node.name), Entry::Real(&v[id.0])));
        }
        entries.push(("adam.lr".into(), Entry::Wide(&lrs)));
        entries.push(("adam.hyper".into(), Entry::Wide(&hyper)));
        for (id, e) in &self.embeddings {
            entries.push((format!("embedding/{id}"), Entry::Wide(e)));
        }

        let table_len: usize = entries.iter().map(|(n, _)| 4 + n.len() + 16).sum();
        let payload_len: usize = entries.iter().map(|(_, e)| e.len()).sum();
        let mut out = Vec::with_capacity(4 + 4 + 8 + header_json.len() + 4 + table_len + payload_len + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, e) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.len() as u64).to_le_bytes());
            offset += e.len() as u64;
        }
        for (_, e) in &entries {
            match e {
                Entry::Real(t) => encode_tensor_into(*t, &mut out)?,
                Entry::Wide(t) => encode_tensor_into(*t, &mut out)?,
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
        if bytes.len() < 4 + 4 + 8 + 4 + 32 {
            return Err(bad("file too short".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, expected \"NVDC\"".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch".into()));
        }
        let mut cur = Cursor { bytes: body, pos: 4 };
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unknown version {version}")));
        }
        let header_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(cur.take(header_len)?).map_err(|e| bad(format!("header: {e}")))?;
        if header.precision != S::PRECISION {
            return Err(bad(format!(
                "stored precision {:?} differs from requested {:?}",
                header.precision,
                S::PRECISION
            )));
        }
        if config_digest(&header.config)? != header.config_digest {
            return Err(bad("config digest mismatch".into()));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| bad("non-utf8 tensor name".into()))?;
            let off = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            let size = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            table.push((name, off, size));
        }
        let payload = &body[cur.pos..];
        let mut tensors = std::collections::HashMap::new();
        let mut order = Vec::new();
        for (name, off, size) in table {
            let chunk = payload
                .get(off..off + size)
                .ok_or_else(|| bad(format!("tensor `{name}` out of range")))?;
            tensors.insert(name.clone(), decode_tensor(chunk, path)?);
            order.push(name);
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor `{name}`")));

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let names: Vec<String> = order.iter().filter_map(|n| n.strip_prefix("param/").map(str::to_string)).collect();
        if names.len() != header.trainable.len() {
            return Err(bad("trainable flags do not match the parameter count".into()));
        }
        for (name, &trainable) in names.iter().zip(&header.trainable) {
            params.insert(name.clone(), take(&format!("param/{name}"))?.into_real::<S>(), trainable)?;
            m.push(take(&format!("adam.m/{name}"))?.into_real::<S>());
            v.push(take(&format!("adam.v/{name}"))?.into_real::<S>());
        }
        let lrs = take("adam.lr")?.into_real::<f64>();
        let hyper = take("adam.hyper")?.into_real::<f64>();
        if lrs.len() != names.len() || hyper.len() != 4 {
            return Err(bad("malformed optimizer state".into()));
        }
        let mut adam = Adam::new(&params, |id, _| lrs.data()[id.0])?;
        adam.beta1 = hyper.data()[0];
        adam.beta2 = hyper.data()[1];
        adam.eps = hyper.data()[2];
        adam.restore(hyper.data()[3] as u64, m, v)?;
        let embeddings = order
            .iter()
            .filter_map(|n| n.strip_prefix("embedding/").map(str::to_string))
            .map(|id| Ok((id.clone(), take(&format!("embedding/{id}"))?.into_real::<f64>())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header,
            params,
            adam,
            embeddings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("nvdc.tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the stored mode.
    pub fn load_mode(path: impl AsRef<Path>, mode: CheckpointMode) -> Result<Self> {
        let ckpt = Self::load(path.as_ref())?;
        if ckpt.header.mode != mode {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} checkpoint, expected {:?}",
                path.as_ref().display(),
                ckpt.header.mode,
                mode
            )));
        }
        Ok(ckpt)
    }

    pub fn embedding(&self, id: &str) -> Option<&Tensor<f64>> {
        self.embeddings.iter().find(|(k, _)| k == id).map(|(_, e)| e)
    }
}

enum Entry<'a, S> {
    Real(&'a Tensor<S>),
    Wide(&'a Tensor<f64>),
}

impl<S: Real> Entry<'_, S> {
    fn len(&self) -> usize {
        match self {
            Entry::Real(t) => encoded_len(*t),
            Entry::Wide(t) => encoded_len(*t),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}
