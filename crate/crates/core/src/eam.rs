//! Energy-aware matching: a learned energy over text-frame pairs, pooled to
//! a text-video energy, trained by contrasting real pairs with fakes drawn
//! by Langevin dynamics from a replay buffer.

use std::collections::VecDeque;
use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GroupReduce, Tape, Var};
use crate::config::{EnergyKind, Pooling};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::layers::{dot_rows, linear, normalize_rows, repeat_each};
use crate::ops::cosine_similarity;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BILINEAR_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct EnergyParams {
    pub kind: EnergyKind,
    pub pooling: Pooling,
    /// Bilinear `W` `[d, d]`.
    pub bilinear: Option<ParamId>,
    /// MLP `(w1 [2d, d'], b1 [1, d'], w2 [d', 1], b2 [1, 1])`.
    pub mlp: Option<(ParamId, ParamId, ParamId, ParamId)>,
}

impl EnergyParams {
    pub fn init(
        store: &mut ParamStore,
        kind: EnergyKind,
        pooling: Pooling,
        d: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut out = Self {
            kind,
            pooling,
            bilinear: None,
            mlp: None,
        };
        match kind {
            EnergyKind::Cossim => {}
            EnergyKind::Bilinear => {
                let mut w = Tensor::eye(d);
                for (x, e) in w.data_mut().iter_mut().zip(rng.normal_vec(d * d, BILINEAR_INIT_STD)) {
                    *x += e;
                }
                out.bilinear = Some(store.register("eam.bilinear.w", w, true)?);
            }
            EnergyKind::Mlp => {
                let h = hidden.max(1);
                let w1 = store.register_normal("eam.mlp.w1", 2 * d, h, 1.0 / ((2 * d) as f64).sqrt(), rng)?;
                let b1 = store.register("eam.mlp.b1", Tensor::zeros(&[1, h]), false)?;
                let w2 = store.register_normal("eam.mlp.w2", h, 1, 1.0 / (h as f64).sqrt(), rng)?;
                let b2 = store.register("eam.mlp.b2", Tensor::scalar(0.0), false)?;
                out.mlp = Some((w1, b1, w2, b2));
            }
        }
        Ok(out)
    }

    /// Per-row energies `[N, 1]` of `N` text rows against `N` frame rows.
    pub fn row_energy(&self, ctx: &mut Ctx, t: Var, f: Var) -> Result<Var> {
        match self.kind {
            EnergyKind::Cossim => {
                let tn = normalize_rows(&mut ctx.tape, t)?;
                let fnorm = normalize_rows(&mut ctx.tape, f)?;
                let c = dot_rows(&mut ctx.tape, tn, fnorm)?;
                Ok(ctx.tape.neg(c))
            }
            EnergyKind::Bilinear => {
                let w = ctx.param(self.bilinear.expect("bilinear weight"));
                let tn = normalize_rows(&mut ctx.tape, t)?;
                let fnorm = normalize_rows(&mut ctx.tape, f)?;
                let tw = ctx.tape.matmul(tn, w)?;
                let c = dot_rows(&mut ctx.tape, tw, fnorm)?;
                Ok(ctx.tape.neg(c))
            }
            EnergyKind::Mlp => {
                let (w1, b1, w2, b2) = self.mlp.expect("mlp weights");
                let (w1, b1, w2, b2) = (ctx.param(w1), ctx.param(b1), ctx.param(w2), ctx.param(b2));
                let x = ctx.tape.concat_cols(&[t, f])?;
                let h = linear(&mut ctx.tape, x, w1, Some(b1))?;
                let h = ctx.tape.relu(h);
                let y = ctx.tape.matmul(h, w2)?;
                ctx.tape.add_scalar(y, b2)
            }
        }
    }

    /// Pooled text-video energies `[N, 1]` for `N` texts `[N, d]` and their
    /// frame stacks `[N·M, d]`. Global pooling needs `fusion`.
    pub fn video_energy(
        &self,
        ctx: &mut Ctx,
        t: Var,
        frames: Var,
        m: usize,
        fusion: Option<&FusionParams>,
    ) -> Result<Var> {
        let n = ctx.tape.shape(t).0;
        if m == 0 || ctx.tape.shape(frames).0 != n * m {
            return Err(Error::Shape(format!("video_energy: {n} texts, M={m}")));
        }
        if self.pooling == Pooling::Global {
            let fusion = fusion.ok_or_else(|| Error::InvalidArgument("global pooling needs fusion".into()))?;
            let video_of: Vec<usize> = (0..n).collect();
            let v = fusion.fuse(ctx, t, frames, &video_of, m, 0.0, None)?.video;
            return self.row_energy(ctx, t, v);
        }
        let t_rep = ctx.tape.gather_rows(t, repeat_each(n, m))?;
        let e = self.row_energy(ctx, t_rep, frames)?;
        match self.pooling {
            Pooling::Avg => ctx.tape.mean_groups(e, m),
            Pooling::Max => ctx.tape.reduce_groups(e, m, GroupReduce::Max),
            Pooling::Min => ctx.tape.reduce_groups(e, m, GroupReduce::Min),
            Pooling::Global => unreachable!(),
        }
    }
}

/// Energy of a single text-frame pair.
pub fn pair_energy(store: &ParamStore, params: &EnergyParams, t: &[f64], f: &[f64]) -> Result<f64> {
    if t.len() != f.len() {
        return Err(Error::Shape("pair_energy: length mismatch".into()));
    }
    if params.kind != EnergyKind::Mlp {
        // Surface degenerate inputs instead of silently scoring zero.
        cosine_similarity(t, f)?;
    }
    let mut ctx = Ctx::new(store);
    let tv = ctx.tape.constant(Tensor::row_vector(t.to_vec()));
    let fv = ctx.tape.constant(Tensor::row_vector(f.to_vec()));
    let e = params.row_energy(&mut ctx, tv, fv)?;
    Ok(ctx.value(e).item())
}

/// Pooled energy of one text `[d]` against frames `[M, d]`.
pub fn video_energy(
    store: &ParamStore,
    params: &EnergyParams,
    t: &[f64],
    frames: &Tensor,
    fusion: Option<&FusionParams>,
) -> Result<f64> {
    let frames = frames.as_matrix();
    if frames.cols() != t.len() {
        return Err(Error::Shape("video_energy: width mismatch".into()));
    }
    let mut ctx = Ctx::new(store);
    let tv = ctx.tape.constant(Tensor::row_vector(t.to_vec()));
    let m = frames.rows();
    let fv = ctx.tape.constant(frames);
    let e = params.video_energy(&mut ctx, tv, fv, m, fusion)?;
    Ok(ctx.value(e).item())
}

/// Energy over a batch of chain states, with input gradients.
pub trait InputEnergy {
    /// Energies `[N]` of texts `t: [N, d]` with frame stacks `f: [N·M, d]`,
    /// and the gradients of their sum with respect to `t` and `f`.
    fn energy_and_grad(&self, t: &Tensor, f: &Tensor, m: usize) -> Result<(Vec<f64>, Tensor, Tensor)>;
}

/// The learned energy, with parameters held fixed.
pub struct ModelEnergy<'a> {
    pub store: &'a ParamStore,
    pub params: &'a EnergyParams,
    pub fusion: Option<&'a FusionParams>,
}

impl InputEnergy for ModelEnergy<'_> {
    fn energy_and_grad(&self, t: &Tensor, f: &Tensor, m: usize) -> Result<(Vec<f64>, Tensor, Tensor)> {
        let mut ctx = Ctx::new(self.store);
        let tv = ctx.tape.leaf(t.clone());
        let fv = ctx.tape.leaf(f.clone());
        let e = self.params.video_energy(&mut ctx, tv, fv, m, self.fusion)?;
        let total = ctx.tape.sum_all(e);
        let mut g = ctx.tape.backward(total);
        let gt = g.take(tv).unwrap_or_else(|| Tensor::zeros(t.shape()));
        let gf = g.take(fv).unwrap_or_else(|| Tensor::zeros(f.shape()));
        Ok((ctx.value(e).data().to_vec(), gt, gf))
    }
}

/// `E ≡ 0`: the chain is a pure random walk.
pub struct ZeroEnergy;

impl InputEnergy for ZeroEnergy {
    fn energy_and_grad(&self, t: &Tensor, f: &Tensor, _m: usize) -> Result<(Vec<f64>, Tensor, Tensor)> {
        Ok((vec![0.0; t.rows()], Tensor::zeros(t.shape()), Tensor::zeros(f.shape())))
    }
}

/// `E = ½‖t‖² + ½‖F‖²` per chain.
pub struct QuadraticEnergy;

impl InputEnergy for QuadraticEnergy {
    fn energy_and_grad(&self, t: &Tensor, f: &Tensor, m: usize) -> Result<(Vec<f64>, Tensor, Tensor)> {
        let (n, d) = (t.rows(), t.cols());
        let e = (0..n)
            .map(|i| {
                let ft: f64 = f.data()[i * m * d..(i + 1) * m * d].iter().map(|x| x * x).sum();
                0.5 * (t.row(i).iter().map(|x| x * x).sum::<f64>() + ft)
            })
            .collect();
        Ok((e, t.clone(), f.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LangevinConfig {
    pub k: usize,
    pub eta: f64,
    pub sigma2: f64,
}

thread_local! {
    static SAMPLER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`langevin_sample`] invocations on the current thread.
pub fn sampler_invocations() -> u64 {
    SAMPLER_CALLS.with(Cell::get)
}

/// Run `N` chains jointly for `K` steps of `x ← x − η∇E(x) + ε`,
/// `ε ∼ N(0, σ²)`. Both gradients use the pre-step pair. Outputs are plain
/// tensors, so no gradient can reach the energy parameters through them.
pub fn langevin_sample(
    energy: &dyn InputEnergy,
    init_t: &Tensor,
    init_f: &Tensor,
    m: usize,
    cfg: &LangevinConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    SAMPLER_CALLS.with(|c| c.set(c.get() + 1));
    if cfg.k < 1 {
        return Err(Error::InvalidArgument("Langevin needs K >= 1".into()));
    }
    if init_f.rows() != init_t.rows() * m || init_f.cols() != init_t.cols() {
        return Err(Error::Shape("langevin_sample: init shapes".into()));
    }
    let std = cfg.sigma2.sqrt();
    let mut t = init_t.clone();
    let mut f = init_f.clone();
    for _ in 0..cfg.k {
        let (e, gt, gf) = energy.energy_and_grad(&t, &f, m)?;
        if e.iter().any(|x| !x.is_finite()) {
            return Err(Error::DivergentChain);
        }
        for (x, g) in t.data_mut().iter_mut().zip(gt.data()) {
            *x += -cfg.eta * g + std * rng.normal();
        }
        for (x, g) in f.data_mut().iter_mut().zip(gf.data()) {
            *x += -cfg.eta * g + std * rng.normal();
        }
    }
    if !t.all_finite() || !f.all_finite() {
        return Err(Error::DivergentChain);
    }
    Ok((t, f))
}

/// Separate FIFO stores of fake texts and fake frame stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub reuse_prob: f64,
    texts: VecDeque<Vec<f64>>,
    frames: VecDeque<Vec<f64>>,
}

/// Which halves of a drawn initialization came from the buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DrawOutcome {
    pub text_reused: bool,
    pub frames_reused: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, reuse_prob: f64) -> Self {
        Self {
            capacity,
            reuse_prob,
            texts: VecDeque::new(),
            frames: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    /// Rebuild a buffer from stored samples, oldest first.
    pub fn from_parts(
        capacity: usize,
        reuse_prob: f64,
        texts: Vec<Vec<f64>>,
        frames: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if texts.len() != frames.len() || texts.len() > capacity {
            return Err(Error::InvalidArgument(format!(
                "{} texts and {} frame stacks for capacity {capacity}",
                texts.len(),
                frames.len()
            )));
        }
        Ok(Self {
            capacity,
            reuse_prob,
            texts: texts.into(),
            frames: frames.into(),
        })
    }

    /// Stored `(text, frames)` samples, oldest first.
    pub fn samples(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.texts.iter().zip(&self.frames).map(|(t, f)| (t.as_slice(), f.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Oldest stored text, for inspecting eviction order.
    pub fn oldest_text(&self) -> Option<&[f64]> {
        self.texts.front().map(|v| v.as_slice())
    }

    /// Initial text `[d]` and frames `[M·d]`. Each half independently
    /// reuses a uniformly chosen stored sample with probability
    /// `reuse_prob` (when nonempty), else draws `U(−1, 1)` entries.
    pub fn draw_init(&self, rng: &mut Rng, m: usize, d: usize) -> (Vec<f64>, Vec<f64>, DrawOutcome) {
        let mut out = DrawOutcome::default();
        let t = if !self.texts.is_empty() && rng.bernoulli(self.reuse_prob) {
            out.text_reused = true;
            self.texts[rng.below(self.texts.len())].clone()
        } else {
            rng.uniform_vec(d, -1.0, 1.0)
        };
        let f = if !self.frames.is_empty() && rng.bernoulli(self.reuse_prob) {
            out.frames_reused = true;
            self.frames[rng.below(self.frames.len())].clone()
        } else {
            rng.uniform_vec(m * d, -1.0, 1.0)
        };
        (t, f, out)
    }

    /// Draw `n` initializations as `[n, d]` and `[n·M, d]`.
    pub fn draw_batch(&self, rng: &mut Rng, n: usize, m: usize, d: usize) -> Result<(Tensor, Tensor)> {
        let mut ts = Vec::with_capacity(n * d);
        let mut fs = Vec::with_capacity(n * m * d);
        for _ in 0..n {
            let (t, f, _) = self.draw_init(rng, m, d);
            if t.len() != d || f.len() != m * d {
                return Err(Error::Shape("replay buffer holds samples of another shape".into()));
            }
            ts.extend(t);
            fs.extend(f);
        }
        Ok((Tensor::matrix(n, d, ts)?, Tensor::matrix(n * m, d, fs)?))
    }

    pub fn push(&mut self, t: Vec<f64>, f: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        while self.texts.len() >= self.capacity {
            self.texts.pop_front();
            self.frames.pop_front();
        }
        self.texts.push_back(t);
        self.frames.push_back(f);
    }

    pub fn push_batch(&mut self, t: &Tensor, f: &Tensor) {
        let n = t.rows();
        if n == 0 {
            return;
        }
        let per = f.len() / n;
        for i in 0..n {
            self.push(t.row(i).to_vec(), f.data()[i * per..(i + 1) * per].to_vec());
        }
    }
}

/// Components of the regularized EBM loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EamTerms {
    pub loss: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
}

/// `mean E_real − mean E_fake + c·(mean E_real² + mean E_fake²)`, from
/// energy columns already on the tape.
pub fn ebm_objective(tape: &mut Tape, real: Var, fake: Var, c: f64) -> Result<Var> {
    let mr = tape.mean_all(real);
    let mf = tape.mean_all(fake);
    let diff = tape.sub(mr, mf)?;
    let r2 = tape.square(real);
    let f2 = tape.square(fake);
    let r2 = tape.mean_all(r2);
    let f2 = tape.mean_all(f2);
    let reg = tape.add(r2, f2)?;
    let reg = tape.scale(reg, c);
    tape.add(diff, reg)
}

/// EBM loss on a tape for real pairs (`t: [B, d]`, `f: [B·M, d]`) against
/// fixed fake samples; gradients reach the energy parameters and whatever
/// produced `t` and `f`, never the sampler.
#[allow(clippy::too_many_arguments)]
pub fn eam_loss_on_tape(
    ctx: &mut Ctx,
    params: &EnergyParams,
    fusion: Option<&FusionParams>,
    t: Var,
    f: Var,
    fake_t: &Tensor,
    fake_f: &Tensor,
    m: usize,
    c: f64,
) -> Result<(Var, EamTerms)> {
    let real = params.video_energy(ctx, t, f, m, fusion)?;
    let ft = ctx.tape.constant(fake_t.clone());
    let ff = ctx.tape.constant(fake_f.clone());
    let fake = params.video_energy(ctx, ft, ff, m, fusion)?;
    let loss = ebm_objective(&mut ctx.tape, real, fake, c)?;
    let mean = |x: &Tensor| x.sum() / x.len().max(1) as f64;
    let terms = EamTerms {
        loss: ctx.value(loss).item(),
        real_mean: mean(ctx.value(real)),
        fake_mean: mean(ctx.value(fake)),
    };
    Ok((loss, terms))
}

/// Draw `n` fake pairs: buffer initialization, Langevin chains, then push
/// the chain outputs back.
#[allow(clippy::too_many_arguments)]
pub fn sample_fakes(
    store: &ParamStore,
    params: &EnergyParams,
    fusion: Option<&FusionParams>,
    buffer: &mut ReplayBuffer,
    n: usize,
    m: usize,
    d: usize,
    cfg: &LangevinConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let (t0, f0) = buffer.draw_batch(rng, n, m, d)?;
    let energy = ModelEnergy { store, params, fusion };
    let (t, f) = langevin_sample(&energy, &t0, &f0, m, cfg, rng)?;
    buffer.push_batch(&t, &f);
    Ok((t, f))
}

/// Convenience: EBM loss value and parameter gradients for a standalone
/// real batch, sampling fakes from the buffer.
#[allow(clippy::too_many_arguments)]
pub fn eam_loss(
    store: &ParamStore,
    params: &EnergyParams,
    fusion: Option<&FusionParams>,
    real_t: &Tensor,
    real_f: &Tensor,
    m: usize,
    buffer: &mut ReplayBuffer,
    cfg: &LangevinConfig,
    c: f64,
    rng: &mut Rng,
) -> Result<(EamTerms, crate::params::ParamGrads)> {
    let (n, d) = (real_t.rows(), real_t.cols());
    if n == 0 {
        return Err(Error::InvalidArgument("eam_loss needs B >= 1".into()));
    }
    let (fake_t, fake_f) = sample_fakes(store, params, fusion, buffer, n, m, d, cfg, rng)?;
    let mut ctx = Ctx::new(store);
    let t = ctx.tape.constant(real_t.clone());
    let f = ctx.tape.constant(real_f.clone());
    let (loss, terms) = eam_loss_on_tape(&mut ctx, params, fusion, t, f, &fake_t, &fake_f, m, c)?;
    let grads = ctx.backward(loss);
    Ok((terms, grads))
}

/// Per-pair energies as plain numbers, for diagnostics.
pub fn energies(
    store: &ParamStore,
    params: &EnergyParams,
    fusion: Option<&FusionParams>,
    t: &Tensor,
    f: &Tensor,
    m: usize,
) -> Result<Vec<f64>> {
    let mut ctx = Ctx::new(store);
    let tv = ctx.tape.constant(t.clone());
    let fv = ctx.tape.constant(f.clone());
    let e = params.video_energy(&mut ctx, tv, fv, m, fusion)?;
    Ok(ctx.value(e).data().to_vec())
}
