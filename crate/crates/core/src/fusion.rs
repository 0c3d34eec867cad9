//! Text-conditioned frame fusion: single-head cross-attention with the text
//! as query and frames as keys and values, followed by two layer norms and
//! a residual fully-connected layer.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::config::FusionMode;
use crate::error::{Error, Result};
use crate::layers::{dropout, layer_norm_affine, linear};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub d_p: usize,
    pub mode: FusionMode,
}

fn rect_identity(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, std)).expect("shape");
    for i in 0..rows.min(cols) {
        let v = t.get(i, i) + 1.0;
        t.set(i, i, v);
    }
    t
}

pub struct FusionOutput {
    /// `[P, d]`
    pub video: Var,
    /// `[P, M]` attention over frames (attention mode only).
    pub attention: Option<Var>,
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, d: usize, d_p: usize, mode: FusionMode, rng: &mut Rng) -> Result<Self> {
        if d_p < 1 {
            return Err(Error::InvalidArgument("d_p must be >= 1".into()));
        }
        let qk_std = 1.0 / (d as f64).sqrt();
        let wq = store.register_normal("fusion.wq", d, d_p, qk_std, rng)?;
        let wk = store.register_normal("fusion.wk", d, d_p, qk_std, rng)?;
        let wv = store.register("fusion.wv", rect_identity(d, d_p, 1e-3, rng), true)?;
        let wo = store.register("fusion.wo", rect_identity(d_p, d, 1e-3, rng), true)?;
        let fc_w = store.register_normal("fusion.fc.w", d, d, 0.02, rng)?;
        let fc_b = store.register("fusion.fc.b", Tensor::zeros(&[1, d]), false)?;
        let ln1_g = store.register("fusion.ln1.g", Tensor::full(&[1, d], 1.0), false)?;
        let ln1_b = store.register("fusion.ln1.b", Tensor::zeros(&[1, d]), false)?;
        let ln2_g = store.register("fusion.ln2.g", Tensor::full(&[1, d], 1.0), false)?;
        let ln2_b = store.register("fusion.ln2.b", Tensor::zeros(&[1, d]), false)?;
        if mode == FusionMode::Mean {
            for id in [wq, wk, wv, wo, fc_w, fc_b, ln1_g, ln1_b, ln2_g, ln2_b] {
                store.set_trainable(id, false);
            }
        }
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            fc_w,
            fc_b,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
            d_p,
            mode,
        })
    }

    /// Fuse the frames of video `video_of[p]` under condition row `p` of
    /// `cond`. `frames` stacks `M` rows per video. `rng` enables dropout on
    /// the attention weights.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse(
        &self,
        ctx: &mut Ctx,
        cond: Var,
        frames: Var,
        video_of: &[usize],
        m: usize,
        drop_rate: f64,
        rng: Option<&mut Rng>,
    ) -> Result<FusionOutput> {
        let pairs = video_of.len();
        let (cond_rows, d) = ctx.tape.shape(cond);
        let (frame_rows, fd) = ctx.tape.shape(frames);
        if m == 0 || cond_rows != pairs || fd != d || frame_rows % m != 0 {
            return Err(Error::Shape(format!(
                "fusion: cond [{cond_rows},{d}], frames [{frame_rows},{fd}], M={m}, {pairs} pairs"
            )));
        }
        let idx: Arc<Vec<usize>> = Arc::new(
            video_of
                .iter()
                .flat_map(|&v| (0..m).map(move |j| v * m + j))
                .collect(),
        );
        if idx.iter().any(|&i| i >= frame_rows) {
            return Err(Error::Shape("fusion: video index out of range".into()));
        }
        if self.mode == FusionMode::Mean {
            let g = ctx.tape.gather_rows(frames, idx)?;
            let video = ctx.tape.mean_groups(g, m)?;
            return Ok(FusionOutput {
                video,
                attention: None,
            });
        }
        let (wq, wk, wv, wo) = (
            ctx.param(self.wq),
            ctx.param(self.wk),
            ctx.param(self.wv),
            ctx.param(self.wo),
        );
        let tape = &mut ctx.tape;
        let keys = tape.matmul(frames, wk)?;
        let values = tape.matmul(frames, wv)?;
        let keys = tape.gather_rows(keys, idx.clone())?;
        let values = tape.gather_rows(values, idx)?;
        let q = tape.matmul(cond, wq)?;
        let logits = tape.block_matmul_bt(q, keys, pairs)?;
        let logits = tape.scale(logits, 1.0 / (self.d_p as f64).sqrt());
        let attn = tape.softmax_rows(logits, None)?;
        let attn_used = match rng {
            Some(rng) => dropout(tape, attn, drop_rate, rng)?,
            None => attn,
        };
        let pooled = tape.block_matmul(attn_used, values, pairs)?;
        let proj = tape.matmul(pooled, wo)?;
        let (g1, b1) = (ctx.param(self.ln1_g), ctx.param(self.ln1_b));
        let z = layer_norm_affine(&mut ctx.tape, proj, g1, b1)?;
        let (fw, fb) = (ctx.param(self.fc_w), ctx.param(self.fc_b));
        let fc = linear(&mut ctx.tape, z, fw, Some(fb))?;
        let res = ctx.tape.add(fc, z)?;
        let (g2, b2) = (ctx.param(self.ln2_g), ctx.param(self.ln2_b));
        let video = layer_norm_affine(&mut ctx.tape, res, g2, b2)?;
        Ok(FusionOutput {
            video,
            attention: Some(attn),
        })
    }
}

/// Fuse one frame stack `[M,d]` under condition `t_cond` (`d` values).
/// Returns the video embedding `[1,d]` and, in attention mode, the
/// attention weights `[1,M]`.
pub fn fuse_frames(
    store: &ParamStore,
    params: &FusionParams,
    frames: &Tensor,
    t_cond: &Tensor,
    drop_rate: f64,
    rng: Option<&mut Rng>,
) -> Result<(Tensor, Option<Tensor>)> {
    let frames = frames.as_matrix();
    if frames.rows() == 0 || frames.cols() != t_cond.len() {
        return Err(Error::Shape(format!(
            "fuse_frames: frames {:?}, condition {:?}",
            frames.shape(),
            t_cond.shape()
        )));
    }
    let m = frames.rows();
    let mut ctx = Ctx::new(store);
    let f = ctx.tape.constant(frames);
    let t = ctx.tape.constant(t_cond.as_matrix().reshape(&[1, t_cond.len()])?);
    let out = params.fuse(&mut ctx, t, f, &[0], m, drop_rate, rng)?;
    Ok((
        ctx.value(out.video).clone(),
        out.attention.map(|a| ctx.value(a).clone()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(d: usize) -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let p = FusionParams::init(&mut store, d, d, FusionMode::Attention, &mut Rng::new(5)).unwrap();
        (store, p)
    }

    #[test]
    fn single_frame_gets_all_attention() {
        let (store, p) = setup(4);
        let f = Tensor::matrix(1, 4, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        for t in [[1.0, 0.0, 0.0, 0.0], [0.0, -3.0, 2.0, 1.0]] {
            let (_, a) = fuse_frames(&store, &p, &f, &Tensor::vector(t.to_vec()), 0.0, None).unwrap();
            assert_eq!(a.unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn identical_frames_split_attention() {
        let (store, p) = setup(4);
        let f = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 0.1, 0.2, -0.3, 0.4]).unwrap();
        let t = Tensor::vector(vec![0.5, -0.1, 0.2, 0.9]);
        let (_, a) = fuse_frames(&store, &p, &f, &t, 0.0, None).unwrap();
        assert_eq!(a.unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn degenerate_shapes_error() {
        let (store, p) = setup(4);
        let f = Tensor::zeros(&[0, 4]);
        assert!(fuse_frames(&store, &p, &f, &Tensor::vector(vec![1.0; 4]), 0.0, None).is_err());
        let f = Tensor::zeros(&[2, 3]);
        assert!(fuse_frames(&store, &p, &f, &Tensor::vector(vec![1.0; 4]), 0.0, None).is_err());
    }

    #[test]
    fn mean_mode_averages_frames() {
        let mut store = ParamStore::new();
        let p = FusionParams::init(&mut store, 2, 2, FusionMode::Mean, &mut Rng::new(1)).unwrap();
        let f = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let (v, a) = fuse_frames(&store, &p, &f, &Tensor::vector(vec![1.0, 0.0]), 0.0, None).unwrap();
        assert_eq!(v.data(), &[2.0, 4.0]);
        assert!(a.is_none());
    }
}
