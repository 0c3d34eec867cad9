//! Pre-extracted embedding datasets: binary format, synthetic generator,
//! and batch iteration.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "EMBD" | version u32 = 1 | d u32 | M u32 | count u64
//! count × { id_len u16 | id utf-8 | d × f32 text | M·d × f32 frames }
//! ```
//!
//! A JSON sidecar (`<path>.json`) carries
//! `{"dim", "frames_per_video", "count", "split", "source"}`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::l2_norm;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMBD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    /// `d` values.
    pub text: Vec<f64>,
    /// `M × d` values, row-major.
    pub frames: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub frames_per_video: usize,
    pub split: Split,
    pub source: String,
    pub items: Vec<PairRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub frames_per_video: usize,
    pub count: u64,
    pub split: Split,
    pub source: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl EmbeddingDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.frames_per_video == 0 {
            return Err(Error::InvalidDataset("d and M must be positive".into()));
        }
        let mut seen = HashSet::new();
        for it in &self.items {
            if it.text.len() != self.dim || it.frames.len() != self.dim * self.frames_per_video {
                return Err(Error::InvalidDataset(format!(
                    "pair_id {} has text len {} and frames len {}, expected d={} M={}",
                    it.pair_id,
                    it.text.len(),
                    it.frames.len(),
                    self.dim,
                    self.frames_per_video
                )));
            }
            if !seen.insert(it.pair_id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate pair_id {}", it.pair_id)));
            }
            if it.pair_id.len() > u16::MAX as usize {
                return Err(Error::InvalidDataset(format!("pair_id too long: {}", it.pair_id)));
            }
            if it.text.iter().chain(&it.frames).any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteEmbedding(it.pair_id.clone()));
            }
            if l2_norm(&it.text) == 0.0
                || it.frames.chunks(self.dim).any(|f| l2_norm(f) == 0.0)
            {
                return Err(Error::ZeroNormEmbedding(it.pair_id.clone()));
            }
        }
        Ok(())
    }

    /// Texts `[n, d]` for the given item indices.
    pub fn texts(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(&self.items[i].text);
        }
        Tensor::matrix(idx.len(), self.dim, data).expect("validated dims")
    }

    /// Frame stacks `[n·M, d]` for the given item indices.
    pub fn frames(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim * self.frames_per_video);
        for &i in idx {
            data.extend_from_slice(&self.items[i].frames);
        }
        Tensor::matrix(idx.len() * self.frames_per_video, self.dim, data).expect("validated dims")
    }

    pub fn batch(&self, idx: &[usize]) -> PairBatch {
        PairBatch {
            texts: self.texts(idx),
            frames: self.frames(idx),
            pair_ids: idx.iter().map(|&i| self.items[i].pair_id.clone()).collect(),
            indices: idx.to_vec(),
        }
    }

    pub fn all(&self) -> PairBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            dim: self.dim,
            frames_per_video: self.frames_per_video,
            count: self.items.len() as u64,
            split: self.split,
            source: self.source.clone(),
        }
    }
}

/// Texts and frame stacks for `B` diagonally paired items.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    /// `[B, d]`
    pub texts: Tensor,
    /// `[B·M, d]`
    pub frames: Tensor,
    pub pair_ids: Vec<String>,
    pub indices: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

pub fn write_dataset(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.dim as u32).to_le_bytes())?;
    w.write_all(&(ds.frames_per_video as u32).to_le_bytes())?;
    w.write_all(&(ds.items.len() as u64).to_le_bytes())?;
    for it in &ds.items {
        w.write_all(&(it.pair_id.len() as u16).to_le_bytes())?;
        w.write_all(it.pair_id.as_bytes())?;
        for &x in it.text.iter().chain(&it.frames) {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let manifest = serde_json::to_string_pretty(&ds.manifest())?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Parse the binary payload without consulting the sidecar manifest.
pub fn decode_dataset(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::UnrecognizedFormat);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32("dim")? as usize;
    let m = r.u32("frames_per_video")? as usize;
    let count = r.u64("record count")?;
    debug_assert_eq!(r.pos, HEADER_LEN);
    let mut items = Vec::new();
    for k in 0..count {
        let len = r.u16("pair_id length")? as usize;
        let id_bytes = r.take(len, "pair_id")?;
        let pair_id = String::from_utf8(id_bytes.to_vec())
            .map_err(|_| Error::InvalidDataset(format!("record {k}: pair_id is not UTF-8")))?;
        let text = r.f32s(dim, "text embedding")?;
        let frames = r.f32s(m * dim, "frame embeddings")?;
        items.push(PairRecord {
            pair_id,
            text,
            frames,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidDataset(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - r.pos
        )));
    }
    Ok(EmbeddingDataset {
        dim,
        frames_per_video: m,
        split: Split::Train,
        source: String::new(),
        items,
    })
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let bytes = fs::read(path)?;
    let mut ds = decode_dataset(&bytes)?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        if manifest.dim != ds.dim
            || manifest.frames_per_video != ds.frames_per_video
            || manifest.count != ds.items.len() as u64
        {
            return Err(Error::ManifestMismatch(format!(
                "manifest says d={} M={} count={}, header says d={} M={} count={}",
                manifest.dim,
                manifest.frames_per_video,
                manifest.count,
                ds.dim,
                ds.frames_per_video,
                ds.items.len()
            )));
        }
        ds.split = manifest.split;
        ds.source = manifest.source;
    } else {
        log::warn!("no manifest next to {}; assuming split=train", path.display());
    }
    ds.validate()?;
    Ok(ds)
}

/// Parameters of the synthetic prototype-plus-drift generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub dim: usize,
    pub frames: usize,
    pub noise: f64,
    pub drift: f64,
    pub seed: u64,
}

fn unit_f32(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::DegenerateVector);
    }
    // Round through f32 so the dataset is exactly representable on disk.
    Ok(v.iter().map(|x| (x / n) as f32 as f64).collect())
}

/// Per pair: prototype `g ~ N(0, I/d)`; frame `j` is
/// `normalize(g + drift·(j/M)·u + noise·ζ_j)` with `u` a unit direction fixed
/// per video; the text is `normalize(mean_j f_j + noise·ζ_t)`. All noise
/// vectors are `N(0, I/d)`.
pub fn synth_generate(spec: &SynthSpec, split: Split) -> Result<EmbeddingDataset> {
    if spec.n_pairs < 1 || spec.dim < 1 || spec.frames < 1 {
        return Err(Error::InvalidArgument("n_pairs, d, M must be >= 1".into()));
    }
    if !(spec.noise >= 0.0 && spec.drift >= 0.0) {
        return Err(Error::InvalidArgument("noise and drift must be >= 0".into()));
    }
    let (d, m) = (spec.dim, spec.frames);
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = Rng::new(spec.seed);
    let mut items = Vec::with_capacity(spec.n_pairs);
    for k in 0..spec.n_pairs {
        let g = rng.normal_vec(d, std);
        let u = {
            let raw = rng.normal_vec(d, 1.0);
            let n = l2_norm(&raw);
            raw.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let mut frames = Vec::with_capacity(m * d);
        let mut mean = vec![0.0; d];
        for j in 1..=m {
            let scale = spec.drift * j as f64 / m as f64;
            let zeta = rng.normal_vec(d, std);
            let raw: Vec<f64> = (0..d)
                .map(|c| g[c] + scale * u[c] + spec.noise * zeta[c])
                .collect();
            let f = unit_f32(&raw)?;
            for (acc, x) in mean.iter_mut().zip(&f) {
                *acc += x / m as f64;
            }
            frames.extend(f);
        }
        let zeta = rng.normal_vec(d, std);
        let raw: Vec<f64> = (0..d).map(|c| mean[c] + spec.noise * zeta[c]).collect();
        items.push(PairRecord {
            pair_id: format!("synth-{k:06}"),
            text: unit_f32(&raw)?,
            frames,
        });
    }
    Ok(EmbeddingDataset {
        dim: d,
        frames_per_video: m,
        split,
        source: format!(
            "synthetic(seed={}, noise={}, drift={})",
            spec.seed, spec.noise, spec.drift
        ),
        items,
    })
}

/// Epoch-based index iterator: every item exactly once per epoch, final
/// batch may be short.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    shuffle: bool,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, shuffle: bool) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if n == 0 {
            return Err(Error::InvalidDataset("empty dataset".into()));
        }
        Ok(Self {
            n,
            batch_size,
            shuffle,
            order: Vec::new(),
            pos: n,
            epoch: 0,
        })
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> usize {
        self.epoch.saturating_sub(1)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Next batch of indices, starting a new (re-shuffled) epoch when the
    /// current one is exhausted.
    pub fn next_indices(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            if self.shuffle {
                rng.shuffle(&mut self.order);
            }
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    pub fn epoch_done(&self) -> bool {
        self.pos >= self.n
    }
}

pub fn next_batch(ds: &EmbeddingDataset, batcher: &mut Batcher, rng: &mut Rng) -> PairBatch {
    let idx = batcher.next_indices(rng);
    ds.batch(&idx)
}
