//! Stochastic text candidates drawn inside a learned radius around the
//! text embedding, and the support text that bounds that radius.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{normalize_rows, repeat_each};
use crate::ops::{cosine_similarity, l2_norm};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RADIUS_INIT_STD: f64 = 0.02;
/// Below this distance between `t` and `v` the support direction is undefined.
pub const SUPPORT_EPS: f64 = 1e-12;

/// Holds `W` of shape `[M, d]` in `r = exp(sᵀW)`.
#[derive(Clone, Debug)]
pub struct RadiusProjector {
    pub w: ParamId,
}

impl RadiusProjector {
    pub fn init(store: &mut ParamStore, m: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.register_normal("radius.w", m, d, RADIUS_INIT_STD, rng)?;
        Ok(Self { w })
    }

    /// Radii `[P, d]` for `P` pairs. `texts` is `[P, d]`, `frames` is
    /// `[P·M, d]` with the frames of pair `p` in rows `p·M..(p+1)·M`.
    pub fn radius(&self, ctx: &mut Ctx, texts: Var, frames: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        batched_radius(&mut ctx.tape, texts, frames, w)
    }
}

pub fn batched_radius(tape: &mut Tape, texts: Var, frames: Var, w: Var) -> Result<Var> {
    let (p, _) = tape.shape(texts);
    let tn = normalize_rows(tape, texts)?;
    let fnorm = normalize_rows(tape, frames)?;
    let s = tape.block_matmul_bt(tn, fnorm, p)?;
    let logits = tape.matmul(s, w)?;
    Ok(tape.exp(logits))
}

/// `r = exp(sᵀW)` with `s_i = cos(f_i, t)`, for one text `[d]`, frames
/// `[M,d]`, and `W` `[M,d]`.
pub fn compute_radius(t: &[f64], frames: &Tensor, w: &Tensor) -> Result<Vec<f64>> {
    let frames = frames.as_matrix();
    let (m, d) = (frames.rows(), frames.cols());
    if d != t.len() || w.rows() != m || w.cols() != d {
        return Err(Error::Shape(format!(
            "compute_radius: t [{}], frames [{m},{d}], W {:?}",
            t.len(),
            w.shape()
        )));
    }
    let s: Vec<f64> = (0..m)
        .map(|i| cosine_similarity(frames.row(i), t))
        .collect::<Result<_>>()?;
    Ok((0..d)
        .map(|k| (0..m).map(|i| s[i] * w.get(i, k)).sum::<f64>().exp())
        .collect())
}

/// `S` candidates `t + r ⊙ ε_i` with `ε_i ∼ N(0, I)`.
pub fn sample_candidates(t: &[f64], r: &[f64], s: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let noise: Vec<Vec<f64>> = (0..s).map(|_| rng.normal_vec(t.len(), 1.0)).collect();
    candidates_from_noise(t, r, &noise)
}

/// Candidates from explicit noise vectors; zero noise reproduces `t`.
pub fn candidates_from_noise(t: &[f64], r: &[f64], noise: &[Vec<f64>]) -> Vec<Vec<f64>> {
    noise
        .iter()
        .map(|e| t.iter().zip(r).zip(e).map(|((t, r), e)| t + r * e).collect())
        .collect()
}

/// Noise for one text: `S` rows of `N(0, I)`, flattened `[S·d]`.
pub fn draw_noise(rng: &mut Rng, s: usize, d: usize) -> Vec<f64> {
    rng.normal_vec(s * d, 1.0)
}

/// Candidate rows `[P·S, d]` for the batched pipeline. `noise` holds `S`
/// rows per text; pair `p` uses the rows of text `text_of[p]`, so the
/// candidates of a text do not depend on which video it is paired with.
pub fn batched_candidates(
    tape: &mut Tape,
    texts: Var,
    radius: Var,
    noise: &Arc<Tensor>,
    text_of: &[usize],
    s: usize,
) -> Result<Var> {
    let p = text_of.len();
    let d = tape.shape(texts).1;
    if noise.cols() != d || !noise.rows().is_multiple_of(s.max(1)) {
        return Err(Error::Shape("candidate noise shape".into()));
    }
    let rep = repeat_each(p, s);
    let t_rep = tape.gather_rows(texts, rep.clone())?;
    let r_rep = tape.gather_rows(radius, rep)?;
    let mut picked = Vec::with_capacity(p * s * d);
    for &i in text_of {
        for k in 0..s {
            let row = i * s + k;
            if row >= noise.rows() {
                return Err(Error::Shape(format!("no noise rows for text {i}")));
            }
            picked.extend_from_slice(noise.row(row));
        }
    }
    let eps = Arc::new(Tensor::matrix(p * s, d, picked)?);
    let scaled = tape.mul_const(r_rep, eps)?;
    tape.add(t_rep, scaled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportText {
    pub t_sup: Vec<f64>,
    /// Set when `‖v − t‖ < SUPPORT_EPS`; `t_sup` is then `t`.
    pub degenerate: bool,
}

/// `t_sup = t + (v − t)/‖v − t‖ · ‖r‖`.
pub fn support_text(t: &[f64], v: &[f64], r: &[f64]) -> Result<SupportText> {
    if t.len() != v.len() || t.len() != r.len() {
        return Err(Error::Shape("support_text: length mismatch".into()));
    }
    let diff: Vec<f64> = v.iter().zip(t).map(|(v, t)| v - t).collect();
    let dist = l2_norm(&diff);
    if dist < SUPPORT_EPS {
        return Ok(SupportText {
            t_sup: t.to_vec(),
            degenerate: true,
        });
    }
    let step = l2_norm(r) / dist;
    Ok(SupportText {
        t_sup: t.iter().zip(&diff).map(|(t, d)| t + d * step).collect(),
        degenerate: false,
    })
}

/// Batched support texts `[P, d]`; degenerate rows fall back to `t`.
pub fn batched_support(tape: &mut Tape, texts: Var, videos: Var, radius: Var) -> Result<Var> {
    let diff = tape.sub(videos, texts)?;
    let dist = tape.row_norm(diff);
    let inv = tape.safe_recip(dist, SUPPORT_EPS);
    let rn = tape.row_norm(radius);
    let k = tape.mul(inv, rn)?;
    let step = tape.mul_col(diff, k)?;
    tape.add(texts, step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_unit_radius() {
        let f = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let r = compute_radius(&[0.3, 0.2, 0.1], &f, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(r, vec![1.0; 3]);
    }

    #[test]
    fn orthogonal_text_gives_unit_radius() {
        let f = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let r = compute_radius(&[0.0, 0.0, 2.0], &f, &w).unwrap();
        assert_eq!(r, vec![1.0; 3]);
    }

    #[test]
    fn radius_matches_hand_calculation() {
        // t = [1,0,0,0]; f1 = [1,1,0,0] (s1 = 1/√2); f2 = [0,0,0,3] (s2 = 0).
        let f = Tensor::matrix(2, 4, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let w = Tensor::matrix(2, 4, vec![1.0, -1.0, 0.5, 0.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let r = compute_radius(&[1.0, 0.0, 0.0, 0.0], &f, &w).unwrap();
        let s1 = std::f64::consts::FRAC_1_SQRT_2;
        let want = [s1.exp(), (-s1).exp(), (0.5 * s1).exp(), 1.0];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_radius_input_errors() {
        let f = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let err = compute_radius(&[1.0, 0.0], &f, &Tensor::zeros(&[1, 2])).unwrap_err();
        assert_eq!(err.to_string(), "degenerate vector");
    }

    #[test]
    fn zero_noise_candidates_equal_text() {
        let t = [0.1, -0.4];
        let c = candidates_from_noise(&t, &[3.0, 5.0], &vec![vec![0.0; 2]; 4]);
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|x| x == &t));
        assert!(sample_candidates(&t, &[1.0, 1.0], 0, &mut Rng::new(0)).is_empty());
    }

    #[test]
    fn candidate_mean_concentrates_on_text() {
        let t = [0.5, -0.25, 1.0];
        let r = [0.5, 1.0, 2.0];
        let n = 100_000;
        let c = sample_candidates(&t, &r, n, &mut Rng::new(3));
        for k in 0..3 {
            let mean = c.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            assert!((mean - t[k]).abs() < 3.0 * r[k] / (n as f64).sqrt());
        }
    }

    #[test]
    fn support_text_examples() {
        let s = support_text(&[0.0, 0.0], &[3.0, 4.0], &[1.0, 0.0]).unwrap();
        assert!((s.t_sup[0] - 0.6).abs() < 1e-15 && (s.t_sup[1] - 0.8).abs() < 1e-15);
        assert!(!s.degenerate);
        let s = support_text(&[1.0, 2.0], &[4.0, 6.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.t_sup, vec![1.0, 2.0]);
        let s = support_text(&[1.0, 2.0], &[4.0, 6.0], &[3.0, 4.0]).unwrap();
        assert!((s.t_sup[0] - 4.0).abs() < 1e-12 && (s.t_sup[1] - 6.0).abs() < 1e-12);
        let s = support_text(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.t_sup, vec![1.0, 2.0]);
    }

    #[test]
    fn batched_support_matches_single() {
        let t = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let v = Tensor::matrix(2, 2, vec![3.0, 4.0, 1.0, 2.0]).unwrap();
        let r = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let mut tape = Tape::new();
        let (tv, vv, rv) = (tape.constant(t), tape.constant(v), tape.constant(r));
        let out = batched_support(&mut tape, tv, vv, rv).unwrap();
        let out = tape.value(out);
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15 && (out.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(out.row(1), &[1.0, 2.0]);
    }
}
