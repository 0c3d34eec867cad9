//! The full pairwise matching model.
//!
//! Every (text, video) pair runs its own pipeline: adapters, radius and
//! candidates, text-frame graph, enriched text, text-conditioned fusion and
//! cosine similarity. Pairs are stacked so each shared weight is applied
//! with one matrix product per chunk.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::config::{FusionMode, LossKind, RunConfig};
use crate::adapters::AdapterParams;
use crate::dataset::PairBatch;
use crate::eam::{
    eam_loss_on_tape, sample_fakes, EamTerms, EnergyParams, LangevinConfig, ModelEnergy, ReplayBuffer,
};
use crate::error::{Error, Result};
use crate::frl::{batched_aggregate, GraphParams};
use crate::fusion::FusionParams;
use crate::layers::cosine_rows;
use crate::losses::{total_loss, LossBreakdown, LossScalars};
use crate::params::{Ctx, ParamGrads, ParamStore};
use crate::rng::Rng;
use crate::stochastic::{batched_candidates, batched_support, draw_noise, RadiusProjector};
use crate::tensor::Tensor;

/// Resolved model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
    /// Stochastic candidates per text.
    pub s: usize,
    pub d_p: usize,
    pub hidden: usize,
}

impl Dims {
    pub fn resolve(cfg: &RunConfig, d: usize, m: usize) -> Result<Self> {
        let pick = |cfgv: usize, data: usize, what: &str| -> Result<usize> {
            match (cfgv, data) {
                (0, x) => Ok(x),
                (c, x) if c == x || x == 0 => Ok(c),
                (c, x) => Err(Error::Config(format!("model.{what}={c} but the dataset has {x}"))),
            }
        };
        let d = pick(cfg.model.dim, d, "dim")?;
        let m = pick(cfg.model.frames, m, "frames")?;
        if d == 0 || m == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(Self {
            d,
            m,
            s: cfg.frl.num_candidates,
            d_p: if cfg.model.d_p == 0 { d } else { cfg.model.d_p },
            hidden: if cfg.model.mlp_hidden == 0 { d } else { cfg.model.mlp_hidden },
        })
    }
}

#[derive(Clone)]
pub struct Model {
    pub config: RunConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub adapters: AdapterParams,
    pub fusion: FusionParams,
    pub radius: Option<RadiusProjector>,
    pub graph: Option<GraphParams>,
    pub energy: Option<EnergyParams>,
    pub scalars: LossScalars,
}

/// Outputs of one pairwise forward pass.
pub struct PairForward {
    /// `cos(t_gen, v)`, `[P, 1]`.
    pub sims: Var,
    /// `cos(t_sup, v)`, `[P, 1]`, when requested and FRL is on.
    pub sup_sims: Option<Var>,
    pub t_gen: Var,
    pub video: Var,
    /// Text-node weights `[P, 1+S]` when FRL is on.
    pub weights: Option<Var>,
    pub attention: Option<Var>,
}

/// Loss components and diagnostics of one training step.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub eam: Option<EamTerms>,
    /// Similarity matrix of the batch, row-major `[B·B]`.
    pub sims: Vec<f64>,
}

impl Model {
    pub fn new(cfg: &RunConfig, d: usize, m: usize) -> Result<Self> {
        cfg.validate()?;
        let dims = Dims::resolve(cfg, d, m)?;
        let mut rng = Rng::new(cfg.model.init_seed);
        let mut store = ParamStore::new();
        let adapters = AdapterParams::init(&mut store, dims.d, cfg.adapters.enabled, &mut rng)?;
        let fusion = FusionParams::init(&mut store, dims.d, dims.d_p, cfg.model.fusion, &mut rng)?;
        let (radius, graph) = if cfg.frl.enabled {
            let r = RadiusProjector::init(&mut store, dims.m, dims.d, &mut rng)?;
            let g = GraphParams::init(
                &mut store,
                cfg.frl.graph,
                dims.d,
                dims.m,
                cfg.frl.heads,
                cfg.frl.layers,
                cfg.frl.drop_f2f,
                &mut rng,
            )?;
            (Some(r), Some(g))
        } else {
            (None, None)
        };
        let energy = if cfg.eam.enabled {
            Some(EnergyParams::init(
                &mut store,
                cfg.eam.energy,
                cfg.eam.pooling,
                dims.d,
                dims.hidden,
                &mut rng,
            )?)
        } else {
            None
        };
        let scalars = LossScalars::init(&mut store)?;
        match cfg.loss.kind {
            LossKind::Ce => {
                store.set_trainable(scalars.tau_p, false);
                store.set_trainable(scalars.bias, false);
            }
            LossKind::Sigmoid => store.set_trainable(scalars.ce_scale, false),
        }
        Ok(Self {
            config: cfg.clone(),
            dims,
            store,
            adapters,
            fusion,
            radius,
            graph,
            energy,
            scalars,
        })
    }

    pub fn frl_enabled(&self) -> bool {
        self.graph.is_some()
    }

    fn fusion_for_energy(&self) -> Option<&FusionParams> {
        (self.config.model.fusion == FusionMode::Attention).then_some(&self.fusion)
    }

    /// The learned energy as a sampler target, when EAM is on.
    pub fn input_energy(&self) -> Option<ModelEnergy<'_>> {
        self.energy.as_ref().map(|params| ModelEnergy {
            store: &self.store,
            params,
            fusion: self.fusion_for_energy(),
        })
    }

    /// Run the pipeline on `pairs` of (text index, video index). `texts` is
    /// `[n_t, d]`, `frames` `[n_v·M, d]`, `noise` holds `S` rows per text.
    /// `rng` switches on training-mode dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_forward(
        &self,
        ctx: &mut Ctx,
        texts: &Tensor,
        frames: &Tensor,
        noise: &Arc<Tensor>,
        pairs: &[(usize, usize)],
        mut rng: Option<&mut Rng>,
        want_support: bool,
    ) -> Result<PairForward> {
        let Dims { d, m, s, .. } = self.dims;
        if texts.cols() != d || frames.cols() != d || !frames.rows().is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "model expects d={d}, M={m}; got texts {:?}, frames {:?}",
                texts.shape(),
                frames.shape()
            )));
        }
        let p = pairs.len();
        if p == 0 {
            return Err(Error::NoQueries);
        }
        let drop = self.config.model.dropout;
        let tv = ctx.tape.constant(texts.as_matrix());
        let fv = ctx.tape.constant(frames.as_matrix());
        let (ta, fa) = self.adapters.adapt(ctx, tv, fv)?;
        let text_of: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let video_of: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let tp = ctx.tape.gather_rows(ta, Arc::new(text_of.clone()))?;
        let mut weights = None;
        let mut radius = None;
        let t_gen = match (&self.radius, &self.graph) {
            (Some(rp), Some(gp)) => {
                let frame_idx: Vec<usize> = video_of
                    .iter()
                    .flat_map(|&v| (0..m).map(move |j| v * m + j))
                    .collect();
                let fp = ctx.tape.gather_rows(fa, Arc::new(frame_idx))?;
                let r = rp.radius(ctx, tp, fp)?;
                radius = Some(r);
                // Node rows are stored once per text, per candidate and per
                // video frame, then gathered into per-graph order.
                let n_t = texts.rows();
                let n_v = frames.rows() / m;
                let pe = ctx.param(gp.pe);
                let pe_rep: Vec<usize> = (0..n_v).flat_map(|_| 0..m).collect();
                let pe_rep = ctx.tape.gather_rows(pe, Arc::new(pe_rep))?;
                let fpe = ctx.tape.add(fa, pe_rep)?;
                let mut parts = vec![ta];
                if s > 0 {
                    parts.push(batched_candidates(&mut ctx.tape, tp, r, noise, &text_of, s)?);
                }
                parts.push(fpe);
                let base = ctx.tape.concat_rows(&parts)?;
                let mut order = Vec::with_capacity(p * (1 + s + m));
                for (g, &(ti, vi)) in pairs.iter().enumerate() {
                    order.push(ti);
                    order.extend((0..s).map(|k| n_t + g * s + k));
                    order.extend((0..m).map(|j| n_t + p * s + vi * m + j));
                }
                let order = Arc::new(order);
                let out = gp.forward_gathered(ctx, base, Some(order.clone()), p, s, m, drop, rng.as_deref_mut(), false)?;
                let x = ctx.tape.gather_rows(base, order)?;
                let (t_gen, w) = batched_aggregate(ctx, &out.tf_logits, x, p, s, m)?;
                weights = Some(w);
                t_gen
            }
            _ => tp,
        };
        let fused = self.fusion.fuse(ctx, t_gen, fa, &video_of, m, drop, rng)?;
        let sims = cosine_rows(&mut ctx.tape, t_gen, fused.video)?;
        let sup_sims = match radius {
            Some(r) if want_support => {
                let t_sup = batched_support(&mut ctx.tape, tp, fused.video, r)?;
                Some(cosine_rows(&mut ctx.tape, t_sup, fused.video)?)
            }
            _ => None,
        };
        Ok(PairForward {
            sims,
            sup_sims,
            t_gen,
            video: fused.video,
            weights,
            attention: fused.attention,
        })
    }

    /// Candidate noise for `n` texts, `S` rows each, from the training stream.
    pub fn draw_noise(&self, rng: &mut Rng, n: usize) -> Arc<Tensor> {
        let Dims { d, s, .. } = self.dims;
        Arc::new(Tensor::matrix(n * s, d, draw_noise(rng, n * s, d)).expect("noise shape"))
    }

    /// Evaluation noise: text `i` draws from `Rng::keyed(seed, i)`, so scores
    /// do not depend on chunking or on which other texts are scored.
    pub fn eval_noise(&self, seed: u64, text_ids: std::ops::Range<usize>) -> Arc<Tensor> {
        let Dims { d, s, .. } = self.dims;
        let n = text_ids.len();
        let mut data = Vec::with_capacity(n * s * d);
        for i in text_ids {
            data.extend(draw_noise(&mut Rng::keyed(seed, i as u64), s, d));
        }
        Arc::new(Tensor::matrix(n * s, d, data).expect("noise shape"))
    }

    /// Similarity matrices `[B, B]` for a batch (main and, with FRL, support),
    /// evaluated in chunks without keeping gradients.
    pub fn similarity_matrix(
        &self,
        batch: &PairBatch,
        noise: &Arc<Tensor>,
        rng: Option<&mut Rng>,
        chunk_pairs: usize,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let b = batch.len();
        let pairs: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).collect();
        let mut main = Vec::with_capacity(b * b);
        let mut sup = Vec::new();
        let mut rng = rng;
        for chunk in pairs.chunks(chunk_pairs.max(1)) {
            let mut ctx = Ctx::new(&self.store);
            let out = self.pair_forward(
                &mut ctx,
                &batch.texts,
                &batch.frames,
                noise,
                chunk,
                rng.as_deref_mut(),
                true,
            )?;
            main.extend_from_slice(ctx.value(out.sims).data());
            if let Some(s) = out.sup_sims {
                sup.extend_from_slice(ctx.value(s).data());
            }
        }
        let main = Tensor::matrix(b, b, main)?;
        let sup = if sup.is_empty() { None } else { Some(Tensor::matrix(b, b, sup)?) };
        Ok((main, sup))
    }

    /// Pooled energies `[n_t, n_v]` of every text against every video on
    /// adapted inputs. `None` when EAM is off.
    pub fn energy_matrix(&self, texts: &Tensor, frames: &Tensor) -> Result<Option<Tensor>> {
        let Some(ep) = &self.energy else {
            return Ok(None);
        };
        let m = self.dims.m;
        let n_t = texts.rows();
        let n_v = frames.rows() / m;
        if n_t == 0 || n_v == 0 {
            return Err(Error::NoQueries);
        }
        let mut ctx = Ctx::new(&self.store);
        let tv = ctx.tape.constant(texts.as_matrix());
        let fv = ctx.tape.constant(frames.as_matrix());
        let (ta, fa) = self.adapters.adapt(&mut ctx, tv, fv)?;
        let t_idx: Vec<usize> = (0..n_t).flat_map(|i| std::iter::repeat_n(i, n_v)).collect();
        let f_idx: Vec<usize> = (0..n_t)
            .flat_map(|_| (0..n_v).flat_map(move |j| (0..m).map(move |k| j * m + k)))
            .collect();
        let t_rep = ctx.tape.gather_rows(ta, Arc::new(t_idx))?;
        let f_rep = ctx.tape.gather_rows(fa, Arc::new(f_idx))?;
        let e = ep.video_energy(&mut ctx, t_rep, f_rep, m, self.fusion_for_energy())?;
        Ok(Some(Tensor::matrix(n_t, n_v, ctx.value(e).data().to_vec())?))
    }

    /// The similarity outputs as one `[P, 1 or 2]` variable for backward.
    fn grad_head(ctx: &mut Ctx, out: &PairForward) -> Result<Var> {
        match out.sup_sims {
            Some(sv) => ctx.tape.concat_cols(&[out.sims, sv]),
            None => Ok(out.sims),
        }
    }

    /// Fake pairs for the EBM term, drawn from `buffer` by Langevin chains
    /// under the current parameters. `None` when the term is off.
    pub fn sample_fakes(
        &self,
        n: usize,
        rng: &mut Rng,
        buffer: Option<&mut ReplayBuffer>,
    ) -> Result<Option<(Tensor, Tensor)>> {
        match (&self.energy, buffer) {
            (Some(ep), Some(buf)) if self.config.loss.lambda_eam != 0.0 => {
                let lc = self.langevin_config();
                let fakes = sample_fakes(
                    &self.store,
                    ep,
                    self.fusion_for_energy(),
                    buf,
                    n,
                    self.dims.m,
                    self.dims.d,
                    &lc,
                    rng,
                )?;
                Ok(Some(fakes))
            }
            _ => Ok(None),
        }
    }

    pub fn langevin_config(&self) -> LangevinConfig {
        LangevinConfig {
            k: self.config.eam.k,
            eta: self.config.eam.eta,
            sigma2: self.config.eam.sigma2,
        }
    }

    /// Loss and parameter gradients for one batch, sampling EBM fakes first.
    pub fn loss_and_grads(
        &self,
        batch: &PairBatch,
        rng: &mut Rng,
        buffer: Option<&mut ReplayBuffer>,
    ) -> Result<(StepReport, ParamGrads)> {
        let fakes = self.sample_fakes(batch.len(), rng, buffer)?;
        self.loss_and_grads_with(batch, rng, fakes.as_ref())
    }

    /// Loss and parameter gradients for one batch with given EBM fakes
    /// (`[B, d]` texts and `[B·M, d]` frames), held fixed.
    ///
    /// The pairwise forward runs in chunks of at most `chunk_pairs`. The loss
    /// is built on its own tape over the similarity values; its adjoints then
    /// seed each chunk's backward pass. With several chunks the forward is
    /// replayed with the same dropout stream instead of holding every tape.
    pub fn loss_and_grads_with(
        &self,
        batch: &PairBatch,
        rng: &mut Rng,
        fakes: Option<&(Tensor, Tensor)>,
    ) -> Result<(StepReport, ParamGrads)> {
        let cfg = &self.config;
        let b = batch.len();
        if b == 0 {
            return Err(Error::NoQueries);
        }
        let chunk_pairs = cfg.train.chunk_pairs.max(1);
        let noise = self.draw_noise(rng, b);
        let mut dropout_rng = rng.fork();
        let replay_rng = dropout_rng.clone();
        let want_sup = self.frl_enabled() && cfg.loss.lambda_sup != 0.0;
        let pairs: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).collect();
        let chunks: Vec<&[(usize, usize)]> = pairs.chunks(chunk_pairs).collect();
        let single = chunks.len() == 1;

        let mut kept: Option<(Ctx, Var)> = None;
        let mut main = Vec::with_capacity(b * b);
        let mut sup = Vec::with_capacity(if want_sup { b * b } else { 0 });
        for chunk in &chunks {
            let mut ctx = Ctx::new(&self.store);
            let out = self.pair_forward(
                &mut ctx,
                &batch.texts,
                &batch.frames,
                &noise,
                chunk,
                Some(&mut dropout_rng),
                want_sup,
            )?;
            main.extend_from_slice(ctx.value(out.sims).data());
            if let Some(s) = out.sup_sims {
                sup.extend_from_slice(ctx.value(s).data());
            }
            if single {
                let head = Self::grad_head(&mut ctx, &out)?;
                kept = Some((ctx, head));
            }
        }

        // Loss tape over the similarity values plus the EBM term.
        let mut lctx = Ctx::new(&self.store);
        let s_main = lctx.tape.leaf(Tensor::matrix(b, b, main.clone())?);
        let s_sup = if want_sup {
            Some(lctx.tape.leaf(Tensor::matrix(b, b, sup)?))
        } else {
            None
        };
        let mut eam_terms = None;
        let eam_var = match (&self.energy, fakes) {
            (Some(ep), Some((ft, ff))) if cfg.loss.lambda_eam != 0.0 => {
                let fusion = self.fusion_for_energy();
                let tv = lctx.tape.constant(batch.texts.clone());
                let fv = lctx.tape.constant(batch.frames.clone());
                let (ta, fa) = self.adapters.adapt(&mut lctx, tv, fv)?;
                let (l, terms) = eam_loss_on_tape(&mut lctx, ep, fusion, ta, fa, ft, ff, self.dims.m, cfg.eam.reg_c)?;
                eam_terms = Some(terms);
                Some(l)
            }
            _ => None,
        };
        let total = total_loss(
            &mut lctx,
            &self.scalars,
            cfg.loss.kind,
            s_main,
            s_sup,
            eam_var,
            cfg.loss.lambda_sup,
            cfg.loss.lambda_eam,
        )?;
        if !total.breakdown.total.is_finite() {
            return Err(Error::Divergence(format!("loss is {}", total.breakdown.total)));
        }
        let lg = lctx.tape.backward(total.loss);
        let mut grads = lctx.collect(&lg);
        let zeros = Tensor::zeros(&[b, b]);
        let g_main = lg.get(s_main).cloned().unwrap_or_else(|| zeros.clone());
        let g_sup = s_sup.map(|v| lg.get(v).cloned().unwrap_or_else(|| zeros.clone()));

        // Seed rows are `[dL/dS, dL/dS_sup]` per pair, matching `grad_head`.
        let backprop = |ctx: &Ctx, head: Var, start: usize, len: usize| -> Result<ParamGrads> {
            let cols = if g_sup.is_some() { 2 } else { 1 };
            let mut data = Vec::with_capacity(len * cols);
            for k in start..start + len {
                data.push(g_main.data()[k]);
                if let Some(gs) = &g_sup {
                    data.push(gs.data()[k]);
                }
            }
            let seed = Tensor::matrix(len, cols, data)?;
            Ok(ctx.collect(&ctx.tape.backward_from(head, seed)))
        };
        if let Some((ctx, head)) = &kept {
            grads.merge(&backprop(ctx, *head, 0, b * b)?);
        } else {
            let mut replay = replay_rng;
            let mut start = 0;
            for chunk in &chunks {
                let mut ctx = Ctx::new(&self.store);
                let out = self.pair_forward(
                    &mut ctx,
                    &batch.texts,
                    &batch.frames,
                    &noise,
                    chunk,
                    Some(&mut replay),
                    want_sup,
                )?;
                let head = Self::grad_head(&mut ctx, &out)?;
                grads.merge(&backprop(&ctx, head, start, chunk.len())?);
                start += chunk.len();
            }
        }
        if !grads.all_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        Ok((
            StepReport {
                loss: total.breakdown,
                eam: eam_terms,
                sims: main,
            },
            grads,
        ))
    }
}
