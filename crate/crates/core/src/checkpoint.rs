//! Binary checkpoints: parameters, optimizer moments, replay buffer, and
//! training position.
//!
//! Layout (little-endian): magic `EGCK`, `u32` version, `u64` length of a
//! JSON header, the header, then raw `f64` arrays in header order:
//! every parameter, Adam first moments, Adam second moments, buffered fake
//! texts, buffered fake frame stacks.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eam::ReplayBuffer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub d: usize,
    pub m: usize,
    pub step: u64,
    pub epoch: usize,
    pub best_rsum: Option<f64>,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
    pub buffer: Option<ReplayBuffer>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct BufferMeta {
    capacity: usize,
    reuse_prob: f64,
    len: usize,
    text_len: usize,
    frames_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    d: usize,
    m: usize,
    step: u64,
    epoch: usize,
    best_rsum: Option<f64>,
    params: Vec<ParamMeta>,
    adam_step: Option<u64>,
    buffer: Option<BufferMeta>,
}

fn put(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    /// Snapshot of a model plus optional training state.
    pub fn capture(
        model: &Model,
        step: u64,
        epoch: usize,
        best_rsum: Option<f64>,
        adam: Option<&AdamState>,
        buffer: Option<&ReplayBuffer>,
    ) -> Self {
        Self {
            config: model.config.clone(),
            config_hash: model.config.hash(),
            d: model.dims.d,
            m: model.dims.m,
            step,
            epoch,
            best_rsum,
            store: model.store.clone(),
            adam: adam.cloned(),
            buffer: buffer.cloned(),
        }
    }

    /// Rebuild the model from the stored config and load the stored values.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, self.d, self.m)?;
        model.store.load_values(&self.store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params: Vec<ParamMeta> = self
            .store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
                decay: p.decay,
            })
            .collect();
        if let Some(a) = &self.adam {
            if a.m.len() != params.len() || a.v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        let buffer = match &self.buffer {
            Some(b) => {
                let (text_len, frames_len) = b
                    .samples()
                    .next()
                    .map_or((0, 0), |(t, f)| (t.len(), f.len()));
                if b.samples().any(|(t, f)| t.len() != text_len || f.len() != frames_len) {
                    return Err(Error::Checkpoint("replay buffer holds samples of mixed shapes".into()));
                }
                Some(BufferMeta {
                    capacity: b.capacity,
                    reuse_prob: b.reuse_prob,
                    len: b.len(),
                    text_len,
                    frames_len,
                })
            }
            None => None,
        };
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            d: self.d,
            m: self.m,
            step: self.step,
            epoch: self.epoch,
            best_rsum: self.best_rsum,
            params,
            adam_step: self.adam.as_ref().map(|a| a.step),
            buffer,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            put(&mut out, p.tensor.data());
        }
        if let Some(a) = &self.adam {
            for t in a.m.iter().chain(&a.v) {
                put(&mut out, t.data());
            }
        }
        if let Some(b) = &self.buffer {
            for (t, _) in b.samples() {
                put(&mut out, t);
            }
            for (_, f) in b.samples() {
                put(&mut out, f);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic").map_err(|_| Error::UnrecognizedFormat)? != MAGIC {
            return Err(Error::UnrecognizedFormat);
        }
        let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let json_len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().expect("8 bytes"));
        let json_len = usize::try_from(json_len).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let header: Header = serde_json::from_slice(cur.take(json_len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let mut store = ParamStore::new();
        for p in &header.params {
            let n = p.shape.iter().product();
            let t = Tensor::new(p.shape.clone(), cur.floats(n, &p.name)?)?;
            let id = store.register(&p.name, t, p.decay)?;
            store.set_trainable(id, p.trainable);
        }
        let adam = match header.adam_step {
            Some(step) => {
                let mut moments = Vec::with_capacity(2 * header.params.len());
                for p in header.params.iter().chain(&header.params) {
                    let n = p.shape.iter().product();
                    moments.push(Tensor::new(p.shape.clone(), cur.floats(n, "optimizer state")?)?);
                }
                let v = moments.split_off(header.params.len());
                Some(AdamState { step, m: moments, v })
            }
            None => None,
        };
        let buffer = match &header.buffer {
            Some(b) => {
                let texts: Vec<Vec<f64>> = (0..b.len)
                    .map(|_| cur.floats(b.text_len, "replay buffer"))
                    .collect::<Result<_>>()?;
                let frames: Vec<Vec<f64>> = (0..b.len)
                    .map(|_| cur.floats(b.frames_len, "replay buffer"))
                    .collect::<Result<_>>()?;
                Some(ReplayBuffer::from_parts(b.capacity, b.reuse_prob, texts, frames)?)
            }
            None => None,
        };
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self {
            config: header.config,
            config_hash: header.config_hash,
            d: header.d,
            m: header.m,
            step: header.step,
            epoch: header.epoch,
            best_rsum: header.best_rsum,
            store,
            adam,
            buffer,
        })
    }

    /// Write atomically: a sibling temporary file is renamed into place, so
    /// an interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn small_model() -> Model {
        let mut cfg = RunConfig::default();
        cfg.frl.num_candidates = 2;
        cfg.frl.heads = 2;
        Model::new(&cfg, 4, 2).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = small_model();
        let mut adam = AdamState::new(&model.store);
        adam.step = 7;
        adam.m[0].data_mut()[0] = 0.25;
        let mut buf = ReplayBuffer::new(4, 0.95);
        let mut rng = Rng::new(1);
        for _ in 0..6 {
            buf.push(rng.uniform_vec(4, -1.0, 1.0), rng.uniform_vec(8, -1.0, 1.0));
        }
        let ck = Checkpoint::capture(&model, 12, 3, Some(123.5), Some(&adam), Some(&buf));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap().store.hash(), model.store.hash());
    }

    #[test]
    fn bare_checkpoint_round_trips() {
        let ck = Checkpoint::capture(&small_model(), 0, 0, None, None, None);
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = Checkpoint::capture(&small_model(), 0, 0, None, None, None).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::UnrecognizedFormat)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
    }
}
