//! Trainable affine maps on raw text and frame embeddings. They stand in
//! for encoder fine-tuning, so input-side losses have parameters to shape.

use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::linear;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Initial weights are `I + N(0, ADAPTER_INIT_STD²)`, biases zero.
pub const ADAPTER_INIT_STD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub text_w: ParamId,
    pub text_b: ParamId,
    pub frame_w: ParamId,
    pub frame_b: ParamId,
    pub enabled: bool,
}

impl AdapterParams {
    pub fn init(store: &mut ParamStore, d: usize, enabled: bool, rng: &mut Rng) -> Result<Self> {
        let text_w = store.register_near_identity("adapter.text.w", d, ADAPTER_INIT_STD, rng)?;
        let text_b = store.register("adapter.text.b", Tensor::zeros(&[1, d]), false)?;
        let frame_w = store.register_near_identity("adapter.frame.w", d, ADAPTER_INIT_STD, rng)?;
        let frame_b = store.register("adapter.frame.b", Tensor::zeros(&[1, d]), false)?;
        if !enabled {
            for id in [text_w, text_b, frame_w, frame_b] {
                store.set_trainable(id, false);
            }
        }
        Ok(Self {
            text_w,
            text_b,
            frame_w,
            frame_b,
            enabled,
        })
    }

    /// Adapted texts `[n,d]` and frames `[n·M,d]`; pass-through when disabled.
    pub fn adapt(&self, ctx: &mut Ctx, texts: Var, frames: Var) -> Result<(Var, Var)> {
        if !self.enabled {
            return Ok((texts, frames));
        }
        let (tw, tb) = (ctx.param(self.text_w), ctx.param(self.text_b));
        let (fw, fb) = (ctx.param(self.frame_w), ctx.param(self.frame_b));
        let t = linear(&mut ctx.tape, texts, tw, Some(tb))?;
        let f = linear(&mut ctx.tape, frames, fw, Some(fb))?;
        Ok((t, f))
    }

    /// Non-recording variant for a single text `[d]` and frame stack `[M,d]`.
    pub fn apply(&self, store: &ParamStore, t: &Tensor, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut ctx = Ctx::new(store);
        let tv = ctx.tape.constant(t.as_matrix());
        let fv = ctx.tape.constant(frames.as_matrix());
        let (a, b) = self.adapt(&mut ctx, tv, fv)?;
        Ok((ctx.value(a).clone(), ctx.value(b).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(enabled: bool) -> (ParamStore, AdapterParams) {
        let mut store = ParamStore::new();
        let p = AdapterParams::init(&mut store, 2, enabled, &mut Rng::new(0)).unwrap();
        (store, p)
    }

    #[test]
    fn disabled_is_identity() {
        let (store, p) = setup(false);
        let t = Tensor::row_vector(vec![0.3, -0.2]);
        let f = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (a, b) = p.apply(&store, &t, &f).unwrap();
        assert_eq!((a, b), (t, f));
    }

    #[test]
    fn identity_weights_pass_through() {
        let (mut store, p) = setup(true);
        store.get_mut(p.text_w).tensor = Tensor::eye(2);
        store.get_mut(p.frame_w).tensor = Tensor::eye(2);
        let t = Tensor::row_vector(vec![0.3, -0.2]);
        let f = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let (a, b) = p.apply(&store, &t, &f).unwrap();
        assert_eq!((a, b), (t, f));
    }

    #[test]
    fn scaling_weights() {
        let (mut store, p) = setup(true);
        store.get_mut(p.text_w).tensor = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let t = Tensor::row_vector(vec![1.0, 0.0]);
        let f = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let (a, _) = p.apply(&store, &t, &f).unwrap();
        assert_eq!(a.data(), &[2.0, 0.0]);
    }

    #[test]
    fn init_is_near_identity() {
        let (store, p) = setup(true);
        let w = store.tensor(p.text_w);
        assert!(w.max_abs_diff(&Tensor::eye(2)) < 1e-2);
        assert!(store.tensor(p.text_b).data().iter().all(|&x| x == 0.0));
    }
}
