//! Contrastive objectives over a `B×B` similarity matrix whose diagonal
//! holds the matched pairs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::LossKind;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Initial CE logit scale `λ = 1/0.07`, stored as `ln λ`.
pub const CE_SCALE_INIT: f64 = 1.0 / 0.07;
pub const CE_SCALE_MAX: f64 = 100.0;
pub const SIGMOID_TAU_P_INIT: f64 = 4.77;
pub const SIGMOID_BIAS_INIT: f64 = -12.93;

#[derive(Clone, Debug)]
pub struct LossScalars {
    /// `λ_p` with `λ = exp(λ_p)`.
    pub ce_scale: ParamId,
    /// `τ_p` with `τ = exp(τ_p)`.
    pub tau_p: ParamId,
    pub bias: ParamId,
}

impl LossScalars {
    pub fn init(store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            ce_scale: store.register("loss.ce_scale", Tensor::scalar(CE_SCALE_INIT.ln()), false)?,
            tau_p: store.register("loss.tau_p", Tensor::scalar(SIGMOID_TAU_P_INIT), false)?,
            bias: store.register("loss.bias", Tensor::scalar(SIGMOID_BIAS_INIT), false)?,
        })
    }

    /// Keep `λ ≤ 100`; call after every optimizer update.
    pub fn clamp(&self, store: &mut ParamStore) {
        let x = &mut store.get_mut(self.ce_scale).tensor.data_mut()[0];
        *x = x.min(CE_SCALE_MAX.ln());
    }

    pub fn main_loss(&self, ctx: &mut Ctx, kind: LossKind, sims: Var) -> Result<Var> {
        match kind {
            LossKind::Ce => {
                let lp = ctx.param(self.ce_scale);
                ce_loss(&mut ctx.tape, sims, lp)
            }
            LossKind::Sigmoid => {
                let tp = ctx.param(self.tau_p);
                let b = ctx.param(self.bias);
                sigmoid_loss(&mut ctx.tape, sims, tp, b)
            }
        }
    }
}

fn square_side(tape: &Tape, s: Var) -> Result<usize> {
    let (r, c) = tape.shape(s);
    if r != c || r == 0 {
        return Err(Error::Shape(format!("similarity matrix must be square and nonempty, got [{r},{c}]")));
    }
    Ok(r)
}

fn diagonal(tape: &mut Tape, a: Var, b: usize) -> Result<Var> {
    tape.gather_flat(a, Arc::new((0..b).map(|i| i * b + i).collect()), b, 1)
}

/// Symmetric cross-entropy over `λ·S` with diagonal positives, `λ = exp(λ_p)`.
pub fn ce_loss(tape: &mut Tape, s: Var, log_scale: Var) -> Result<Var> {
    let b = square_side(tape, s)?;
    let scale = tape.exp(log_scale);
    let logits = tape.mul_scalar(s, scale)?;
    let rows = tape.log_softmax_rows(logits);
    let t2v = diagonal(tape, rows, b)?;
    let lt = tape.transpose(logits);
    let cols = tape.log_softmax_rows(lt);
    let v2t = diagonal(tape, cols, b)?;
    let both = tape.add(t2v, v2t)?;
    let mean = tape.mean_all(both);
    Ok(tape.scale(mean, -0.5))
}

/// `(1/B) Σ_ij softplus(−z_ij (τ S_ij + b))`, `z = +1` on the diagonal and
/// `−1` elsewhere, `τ = exp(τ_p)`.
pub fn sigmoid_loss(tape: &mut Tape, s: Var, tau_p: Var, bias: Var) -> Result<Var> {
    let b = square_side(tape, s)?;
    let tau = tape.exp(tau_p);
    let logits = tape.mul_scalar(s, tau)?;
    let logits = tape.add_scalar(logits, bias)?;
    let signs: Vec<f64> = (0..b * b).map(|k| if k / b == k % b { -1.0 } else { 1.0 }).collect();
    let signed = tape.mul_const(logits, Arc::new(Tensor::matrix(b, b, signs)?))?;
    let terms = tape.softplus(signed);
    let total = tape.sum_all(terms);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// CE loss value for a plain matrix.
pub fn ce_loss_value(s: &Tensor, scale: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.as_matrix());
    let lp = tape.constant(Tensor::scalar(scale.ln()));
    let l = ce_loss(&mut tape, sv, lp)?;
    Ok(tape.value(l).item())
}

/// Sigmoid loss value for a plain matrix.
pub fn sigmoid_loss_value(s: &Tensor, tau_p: f64, bias: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.as_matrix());
    let tp = tape.constant(Tensor::scalar(tau_p));
    let b = tape.constant(Tensor::scalar(bias));
    let l = sigmoid_loss(&mut tape, sv, tp, b)?;
    Ok(tape.value(l).item())
}

/// Weighted components of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub support: f64,
    pub eam: f64,
    pub lambda_sup: f64,
    pub lambda_eam: f64,
    pub total: f64,
}

/// `L_main(S) + λ_sup·L_main(S_sup) + λ_eam·L_eam` on one tape. `sup` and
/// `eam` are optional so disabled terms cost nothing.
pub struct TotalLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    ctx: &mut Ctx,
    scalars: &LossScalars,
    kind: LossKind,
    sims: Var,
    sup_sims: Option<Var>,
    eam: Option<Var>,
    lambda_sup: f64,
    lambda_eam: f64,
) -> Result<TotalLoss> {
    let main = scalars.main_loss(ctx, kind, sims)?;
    let mut out = LossBreakdown {
        main: ctx.value(main).item(),
        lambda_sup,
        lambda_eam,
        ..Default::default()
    };
    let mut loss = main;
    if let Some(sup) = sup_sims.filter(|_| lambda_sup != 0.0) {
        let l = scalars.main_loss(ctx, kind, sup)?;
        out.support = ctx.value(l).item();
        let w = ctx.tape.scale(l, lambda_sup);
        loss = ctx.tape.add(loss, w)?;
    }
    if let Some(e) = eam.filter(|_| lambda_eam != 0.0) {
        out.eam = ctx.value(e).item();
        let w = ctx.tape.scale(e, lambda_eam);
        loss = ctx.tape.add(loss, w)?;
    }
    out.total = ctx.value(loss).item();
    Ok(TotalLoss { loss, breakdown: out })
}
