//! The tiny model used for finite-difference gradient checks.

use eaglenet::config::{EnergyKind, LossKind, Pooling, RunConfig};
use eaglenet::dataset::{synth_generate, PairBatch, Split, SynthSpec};
use eaglenet::eam::ReplayBuffer;
use eaglenet::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
use eaglenet::model::Model;
use eaglenet::Rng;

pub const TINY_D: usize = 8;
pub const TINY_M: usize = 3;

/// One differentiable path through the training objective.
#[derive(Clone, Copy, Debug)]
pub enum LossPath {
    /// Main contrastive term alone.
    Main(LossKind),
    /// Main plus the support-text term.
    Support(LossKind),
    /// CE main term plus the energy term.
    Eam(EnergyKind, Pooling),
    /// Everything at default weights.
    Total(LossKind),
}

impl LossPath {
    pub fn name(self) -> String {
        let kind = |k: LossKind| match k {
            LossKind::Ce => "ce",
            LossKind::Sigmoid => "sigmoid",
        };
        match self {
            LossPath::Main(k) => kind(k).to_string(),
            LossPath::Support(k) => format!("{}+support", kind(k)),
            LossPath::Eam(e, p) => format!("eam {e:?}/{p:?}").to_lowercase(),
            LossPath::Total(k) => format!("total ({})", kind(k)),
        }
    }

    pub fn config(self) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.frl.num_candidates = 2;
        cfg.frl.heads = 2;
        cfg.frl.layers = 2;
        cfg.eam.k = 3;
        cfg.model.init_seed = 11;
        match self {
            LossPath::Main(k) => {
                cfg.loss.kind = k;
                cfg.loss.lambda_sup = 0.0;
                cfg.eam.enabled = false;
            }
            LossPath::Support(k) => {
                cfg.loss.kind = k;
                cfg.eam.enabled = false;
            }
            LossPath::Eam(e, p) => {
                cfg.loss.kind = LossKind::Ce;
                cfg.loss.lambda_sup = 0.0;
                cfg.eam.energy = e;
                cfg.eam.pooling = p;
            }
            LossPath::Total(k) => cfg.loss.kind = k,
        }
        cfg
    }
}

/// Three aligned pairs, d=8, M=3.
pub fn tiny_batch() -> PairBatch {
    let spec = SynthSpec { n_pairs: 3, dim: TINY_D, frames: TINY_M, noise: 0.3, drift: 0.5, seed: 5 };
    synth_generate(&spec, Split::Train).unwrap().all()
}

/// Central-difference check of the total loss gradient with dropout masks
/// and fake samples held fixed, at step `h`.
pub fn grad_check_path_at(path: LossPath, h: f64) -> GradCheckReport {
    let model = Model::new(&path.config(), TINY_D, TINY_M).unwrap();
    let batch = tiny_batch();
    let mut buffer = ReplayBuffer::new(64, 0.95);
    let fakes = model
        .sample_fakes(batch.len(), &mut Rng::new(3), Some(&mut buffer))
        .unwrap();
    let rng = Rng::new(9);
    grad_check(
        &model.store,
        |store| {
            let mut m = model.clone();
            m.store = store.clone();
            let (rep, g) = m.loss_and_grads_with(&batch, &mut rng.clone(), fakes.as_ref())?;
            Ok((rep.loss.total, g))
        },
        h,
        DEFAULT_TOL,
    )
    .unwrap()
}

pub fn grad_check_path(path: LossPath) -> GradCheckReport {
    grad_check_path_at(path, DEFAULT_STEP)
}
