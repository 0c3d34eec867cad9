//! Composite differentiable building blocks.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Scale each row to unit length; zero rows stay zero.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.row_norm(x);
    let inv = tape.safe_recip(n, f64::MIN_POSITIVE);
    tape.mul_col(x, inv)
}

/// Row-wise cosine similarity, `[m,d] × [m,d] -> [m,1]`.
pub fn cosine_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = normalize_rows(tape, a)?;
    let bn = normalize_rows(tape, b)?;
    let p = tape.mul(an, bn)?;
    Ok(tape.sum_cols(p))
}

/// Row-wise dot product, `[m,d] × [m,d] -> [m,1]`.
pub fn dot_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    Ok(tape.sum_cols(p))
}

/// `x·w (+ b)` with `w` stored `[in, out]` and `b` `[1, out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS);
    let g = tape.mul_row(n, gain)?;
    tape.add_row(g, bias)
}

/// Inverted dropout; identity when `rate == 0`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, Arc::new(Tensor::matrix(r, c, mask)?))
}

/// Indices `[0, 0, …, 1, 1, …]` with each of `0..n` repeated `times`.
pub fn repeat_each(n: usize, times: usize) -> Arc<Vec<usize>> {
    Arc::new((0..n).flat_map(|i| std::iter::repeat_n(i, times)).collect())
}
