//! The desk-scale synthetic scenario: 256 training and 64 held-out pairs,
//! d=64, M=8, trained for 300 steps.

use std::time::Instant;

use eaglenet::config::{EnergyKind, LossKind, Pooling, RunConfig};
use eaglenet::dataset::{synth_generate, EmbeddingDataset, Split, SynthSpec};
use eaglenet::error::Result;
use eaglenet::model::Model;
use eaglenet::retrieval::EvalReport;
use eaglenet::train::{evaluate_model, train, Variant};

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const STEPS: usize = 300;
pub const NOISE: f64 = 1.5;
pub const DRIFT: f64 = 0.5;
pub const LR: f64 = 3e-3;

pub fn spec(n_pairs: usize, seed: u64) -> SynthSpec {
    SynthSpec { n_pairs, dim: 64, frames: 8, noise: NOISE, drift: DRIFT, seed }
}

/// Training and held-out sets.
pub type Data = (EmbeddingDataset, EmbeddingDataset);

/// The data is the same for every run seed.
pub fn datasets() -> Result<Data> {
    Ok((
        synth_generate(&spec(256, 1), Split::Train)?,
        synth_generate(&spec(64, 2), Split::Test)?,
    ))
}

/// S=4, H=2, L=2, B=32, sigmoid loss, bilinear energy, average pooling.
pub fn config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.frl.num_candidates = 4;
    cfg.frl.heads = 2;
    cfg.frl.layers = 2;
    cfg.train.batch_size = 32;
    cfg.train.max_steps = STEPS;
    cfg.train.lr = LR;
    cfg.train.seed = seed;
    cfg.model.init_seed = seed;
    cfg.loss.kind = LossKind::Sigmoid;
    cfg.eam.energy = EnergyKind::Bilinear;
    cfg.eam.pooling = Pooling::Avg;
    cfg
}

pub struct DeskRun {
    pub seed: u64,
    pub variant: String,
    pub model: Model,
    pub train: EvalReport,
    pub heldout: EvalReport,
    pub train_seconds: f64,
    pub seconds: f64,
}

/// Train one variant of the scenario and evaluate on both sets.
pub fn run(variant: &str, seed: u64, data: &Data) -> Result<DeskRun> {
    let start = Instant::now();
    let mut cfg = config(seed);
    Variant::parse(variant)?.apply(&mut cfg)?;
    let out = train(&cfg, &data.0, None, None)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let train_report = evaluate_model(&out.model, &data.0, cfg.eval.sample_seed)?;
    let heldout = evaluate_model(&out.model, &data.1, cfg.eval.sample_seed)?;
    Ok(DeskRun {
        seed,
        variant: variant.to_string(),
        model: out.model,
        train: train_report,
        heldout,
        train_seconds,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean pooled energy of matched pairs and of mismatched pairs on `ds`.
pub fn energy_gap(model: &Model, ds: &EmbeddingDataset) -> Result<Option<(f64, f64)>> {
    let batch = ds.all();
    let Some(e) = model.energy_matrix(&batch.texts, &batch.frames)? else {
        return Ok(None);
    };
    let n = e.rows();
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diag += e.get(i, j);
            } else {
                off += e.get(i, j);
            }
        }
    }
    Ok(Some((diag / n as f64, off / (n * n - n).max(1) as f64)))
}
