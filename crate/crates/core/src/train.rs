//! Training loop, evaluation, and ablation runs.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{EnergyKind, GraphKind, LossKind, Pooling, RunConfig};
use crate::dataset::{Batcher, EmbeddingDataset};
use crate::eam::{sampler_invocations, ReplayBuffer};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState, WarmupCosine};
use crate::retrieval::{compute_metrics, score_all, EvalReport};
use crate::rng::Rng;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.json";

/// One line of the training log, written at the end of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean loss components over the epoch's batches.
    pub loss: LossBreakdown,
    /// Mean real and fake energies when EAM is on.
    pub energies: Option<(f64, f64)>,
    pub val: Option<EvalReport>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// Final parameters (not necessarily the best).
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub steps: usize,
    pub best_rsum: Option<f64>,
    pub best: Option<Checkpoint>,
    pub adam: AdamState,
    pub buffer: Option<ReplayBuffer>,
    pub sampler_calls: u64,
}

impl TrainOutcome {
    pub fn last_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            self.steps as u64,
            self.history.last().map_or(0, |h| h.epoch),
            self.best_rsum,
            Some(&self.adam),
            self.buffer.as_ref(),
        )
    }
}

/// Total optimizer steps implied by the config.
pub fn planned_steps(cfg: &RunConfig, n_train: usize) -> usize {
    if cfg.train.max_steps > 0 {
        cfg.train.max_steps
    } else {
        cfg.train.epochs * n_train.div_ceil(cfg.train.batch_size)
    }
}

/// Score a dataset against itself and compute both directions.
pub fn evaluate_model(model: &Model, ds: &EmbeddingDataset, eval_seed: u64) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::NoQueries);
    }
    let batch = ds.all();
    let s = score_all(model, &batch.texts, &batch.frames, eval_seed, model.config.eval.chunk_pairs)?;
    compute_metrics(&s)
}

/// Evaluate a checkpoint. A config-hash mismatch is only a warning.
pub fn evaluate(ck: &Checkpoint, ds: &EmbeddingDataset, eval_seed: u64) -> Result<EvalReport> {
    if ck.config.hash() != ck.config_hash {
        warn!(
            "checkpoint config hash {} does not match its stored config ({})",
            ck.config_hash,
            ck.config.hash()
        );
    }
    if ds.is_empty() {
        return Err(Error::NoQueries);
    }
    if ds.dim != ck.d || ds.frames_per_video != ck.m {
        return Err(Error::InvalidDataset(format!(
            "dataset has d={}, M={}; checkpoint expects d={}, M={}",
            ds.dim, ds.frames_per_video, ck.d, ck.m
        )));
    }
    evaluate_model(&ck.model()?, ds, eval_seed)
}

#[derive(Default)]
struct EpochAcc {
    n: usize,
    loss: LossBreakdown,
    real: f64,
    fake: f64,
    eam_n: usize,
}

impl EpochAcc {
    fn add(&mut self, l: &LossBreakdown, eam: Option<(f64, f64)>) {
        self.n += 1;
        self.loss.main += l.main;
        self.loss.support += l.support;
        self.loss.eam += l.eam;
        self.loss.total += l.total;
        self.loss.lambda_sup = l.lambda_sup;
        self.loss.lambda_eam = l.lambda_eam;
        if let Some((r, f)) = eam {
            self.real += r;
            self.fake += f;
            self.eam_n += 1;
        }
    }

    fn mean(&self) -> (LossBreakdown, Option<(f64, f64)>) {
        let k = self.n.max(1) as f64;
        let mut l = self.loss;
        l.main /= k;
        l.support /= k;
        l.eam /= k;
        l.total /= k;
        let e = (self.eam_n > 0).then(|| (self.real / self.eam_n as f64, self.fake / self.eam_n as f64));
        (l, e)
    }
}

/// Train on `train`, validating on `val` at epoch ends. With `out`, the
/// best-by-validation-Rsum and latest checkpoints and the epoch history are
/// written there; a divergence error leaves the files from the last good
/// epoch in place.
pub fn train(
    cfg: &RunConfig,
    train: &EmbeddingDataset,
    val: Option<&EmbeddingDataset>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::NoQueries);
    }
    let mut model = Model::new(cfg, train.dim, train.frames_per_video)?;
    if let Some(v) = val {
        if v.dim != model.dims.d || v.frames_per_video != model.dims.m {
            return Err(Error::InvalidDataset("validation set shape differs from training set".into()));
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let calls_before = sampler_invocations();
    let total_steps = planned_steps(cfg, train.len());
    let sched = WarmupCosine {
        base_lr: cfg.train.lr,
        total_steps,
        warmup_frac: cfg.train.warmup,
    };
    let adam_cfg = AdamConfig {
        weight_decay: cfg.train.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.store);
    let mut buffer = model
        .energy
        .as_ref()
        .map(|_| ReplayBuffer::new(cfg.eam.buffer_capacity, cfg.eam.reuse_prob));
    let mut rng = Rng::new(cfg.train.seed);
    let mut batcher = Batcher::new(train.len(), cfg.train.batch_size, true)?;
    let mut history = Vec::new();
    let mut best_rsum: Option<f64> = None;
    let mut best: Option<Checkpoint> = None;
    let mut acc = EpochAcc::default();
    let mut epoch_start = Instant::now();
    for step in 0..total_steps {
        let idx = batcher.next_indices(&mut rng);
        let batch = train.batch(&idx);
        let (report, grads) = model.loss_and_grads(&batch, &mut rng, buffer.as_mut())?;
        let lr = sched.lr_at(step);
        adam_step(&mut model.store, &grads, &mut adam, lr, &adam_cfg)?;
        model.scalars.clamp(&mut model.store);
        acc.add(&report.loss, report.eam.map(|e| (e.real_mean, e.fake_mean)));

        let last = step + 1 == total_steps;
        if !(batcher.epoch_done() || last) {
            continue;
        }
        let epoch = batcher.epoch() + 1;
        let due = cfg.train.eval_every > 0 && epoch % cfg.train.eval_every == 0;
        let val_report = match val {
            Some(v) if due || last => Some(evaluate_model(&model, v, cfg.eval.sample_seed)?),
            _ => None,
        };
        let (loss, energies) = acc.mean();
        acc = EpochAcc::default();
        let entry = EpochLog {
            epoch,
            step: step + 1,
            lr,
            loss,
            energies,
            val: val_report,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        epoch_start = Instant::now();
        info!(
            "epoch {epoch} step {} loss {:.4} (main {:.4}, sup {:.4}, eam {:.4}){}",
            step + 1,
            loss.total,
            loss.main,
            loss.support,
            loss.eam,
            val_report.map_or(String::new(), |r| format!(
                " val t2v R@1 {:.2} Rsum {:.2}",
                r.t2v.r1,
                r.t2v.rsum + r.v2t.rsum
            ))
        );
        if let Some(r) = &val_report {
            let rsum = r.t2v.rsum + r.v2t.rsum;
            if best_rsum.is_none_or(|b| rsum > b) {
                best_rsum = Some(rsum);
                let ck = Checkpoint::capture(&model, step as u64 + 1, epoch, best_rsum, Some(&adam), buffer.as_ref());
                if let Some(dir) = out {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                }
                best = Some(ck);
            }
        }
        history.push(entry);
        if let Some(dir) = out {
            Checkpoint::capture(&model, step as u64 + 1, epoch, best_rsum, Some(&adam), buffer.as_ref())
                .save(&dir.join(LAST_CHECKPOINT))?;
            std::fs::write(dir.join(HISTORY_FILE), serde_json::to_string_pretty(&history)?)?;
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        steps: total_steps,
        best_rsum,
        best,
        adam,
        buffer,
        sampler_calls: sampler_invocations() - calls_before,
    })
}

/// A named configuration change for an ablation run.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        let v = Self { name: name.to_string() };
        v.apply(&mut RunConfig::default())?;
        Ok(v)
    }

    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let unknown = || Error::UnknownVariant(self.name.clone());
        match self.name.as_str() {
            "full" => {}
            "no-frl" => cfg.frl.enabled = false,
            "no-eam" => cfg.eam.enabled = false,
            "ce-loss" => cfg.loss.kind = LossKind::Ce,
            "sigmoid-loss" => cfg.loss.kind = LossKind::Sigmoid,
            "gat" => cfg.frl.graph = GraphKind::Gat,
            "no-f2f" => cfg.frl.drop_f2f = true,
            "fused-v-energy" => cfg.eam.pooling = Pooling::Global,
            other => {
                let (key, value) = other.split_once('=').ok_or_else(unknown)?;
                let value = serde_json::Value::String(value.to_string());
                match key {
                    "energy" => {
                        cfg.eam.energy = serde_json::from_value::<EnergyKind>(value).map_err(|_| unknown())?
                    }
                    "pooling" => cfg.eam.pooling = serde_json::from_value::<Pooling>(value).map_err(|_| unknown())?,
                    _ => return Err(unknown()),
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
    pub sampler_calls: u64,
}

/// Train the full model and each variant for every seed on the same data
/// and report held-out metrics. The seed drives both initialization and
/// batching.
pub fn ablate(
    cfg: &RunConfig,
    variants: &[String],
    seeds: &[u64],
    train_ds: &EmbeddingDataset,
    eval_ds: &EmbeddingDataset,
) -> Result<Vec<AblationRow>> {
    let mut parsed = vec![Variant::parse("full")?];
    for v in variants {
        let v = Variant::parse(v)?;
        if !parsed.contains(&v) {
            parsed.push(v);
        }
    }
    let mut rows = Vec::new();
    for v in &parsed {
        for &seed in seeds {
            let mut c = cfg.clone();
            v.apply(&mut c)?;
            c.train.seed = seed;
            c.model.init_seed = seed;
            c.validate()?;
            let out = train(&c, train_ds, None, None)?;
            let report = evaluate_model(&out.model, eval_ds, c.eval.sample_seed)?;
            info!("ablation {} seed {seed}: t2v R@1 {:.2}", v.name, report.t2v.r1);
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                report,
                sampler_calls: out.sampler_calls,
            });
        }
    }
    Ok(rows)
}

/// Plain-text comparison table: one line per variant and seed, then the
/// per-variant mean.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<16} {:>6} {:>7} {:>7} {:>7} {:>8} {:>8}\n",
        "variant", "seed", "R@1", "R@5", "R@10", "t2v Rsum", "v2t Rsum"
    );
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
        out.push_str(&format!(
            "{:<16} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>8.2}\n",
            r.variant, r.seed, r.report.t2v.r1, r.report.t2v.r5, r.report.t2v.r10, r.report.t2v.rsum, r.report.v2t.rsum
        ));
    }
    for name in names {
        let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
        let k = sel.len() as f64;
        let mean = |f: &dyn Fn(&AblationRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / k;
        out.push_str(&format!(
            "{:<16} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>8.2}\n",
            name,
            "mean",
            mean(&|r| r.report.t2v.r1),
            mean(&|r| r.report.t2v.r5),
            mean(&|r| r.report.t2v.r10),
            mean(&|r| r.report.t2v.rsum),
            mean(&|r| r.report.v2t.rsum)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_parse() {
        for v in ["no-frl", "no-eam", "ce-loss", "gat", "no-f2f", "energy=mlp", "pooling=min", "fused-v-energy"] {
            Variant::parse(v).unwrap();
        }
        for v in ["no-thing", "energy=quadratic", "depth=3"] {
            assert_eq!(Variant::parse(v).unwrap_err().to_string(), format!("unknown variant `{v}`"));
        }
    }

    #[test]
    fn variant_changes_config() {
        let mut c = RunConfig::default();
        Variant::parse("energy=cossim").unwrap().apply(&mut c).unwrap();
        Variant::parse("no-frl").unwrap().apply(&mut c).unwrap();
        assert_eq!(c.eam.energy, EnergyKind::Cossim);
        assert!(!c.frl.enabled);
    }
}
