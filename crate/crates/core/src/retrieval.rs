//! Pairwise scoring of every text against every video, and recall/rank
//! metrics with diagonal ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Ctx;
use crate::tensor::Tensor;

/// Scores `[n_t, n_v]` for `texts` `[n_t, d]` against videos `frames`
/// `[n_v·M, d]`. No dropout; candidate noise for text `i` is keyed by
/// `(eval_seed, i)` so the result is independent of `chunk_pairs`.
pub fn score_all(
    model: &Model,
    texts: &Tensor,
    frames: &Tensor,
    eval_seed: u64,
    chunk_pairs: usize,
) -> Result<Tensor> {
    let texts = texts.as_matrix();
    let n_t = texts.rows();
    let m = model.dims.m;
    if !frames.rows().is_multiple_of(m) {
        return Err(Error::Shape(format!("{} frame rows is not a multiple of M={m}", frames.rows())));
    }
    let n_v = frames.rows() / m;
    if n_t == 0 || n_v == 0 {
        return Err(Error::NoQueries);
    }
    let noise = model.eval_noise(eval_seed, 0..n_t);
    let pairs: Vec<(usize, usize)> = (0..n_t).flat_map(|i| (0..n_v).map(move |j| (i, j))).collect();
    let mut out = Vec::with_capacity(n_t * n_v);
    for chunk in pairs.chunks(chunk_pairs.max(1)) {
        let mut ctx = Ctx::new(&model.store);
        let fwd = model.pair_forward(&mut ctx, &texts, frames, &noise, chunk, None, false)?;
        out.extend_from_slice(ctx.value(fwd.sims).data());
    }
    Tensor::matrix(n_t, n_v, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    T2v,
    V2t,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Median 1-based rank.
    pub mdr: f64,
    /// Mean 1-based rank.
    pub mnr: f64,
    pub rsum: f64,
    pub n_queries: usize,
}

impl MetricsReport {
    pub fn from_ranks(direction: Direction, ranks: &[usize]) -> Result<Self> {
        let n = ranks.len();
        if n == 0 {
            return Err(Error::NoQueries);
        }
        let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        let mdr = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let (r1, r5, r10) = (recall(1), recall(5), recall(10));
        Ok(Self {
            direction,
            r1,
            r5,
            r10,
            mdr,
            mnr: ranks.iter().sum::<usize>() as f64 / n as f64,
            rsum: r1 + r5 + r10,
            n_queries: n,
        })
    }
}

/// 1-based rank of the target within `scores`: one plus the number of
/// candidates scoring strictly higher, plus equal-scored candidates with a
/// smaller index.
pub fn rank_of(scores: impl Iterator<Item = f64>, target: usize, target_score: f64) -> usize {
    1 + scores
        .enumerate()
        .filter(|&(j, s)| s > target_score || (s == target_score && j < target))
        .count()
}

/// Ranks for both directions with item `i` matching item `i`.
pub fn diagonal_ranks(s: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = s.as_matrix();
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::Shape(format!(
            "diagonal ground truth needs a square score matrix, got [{n},{}]",
            s.cols()
        )));
    }
    if n == 0 {
        return Err(Error::NoQueries);
    }
    let t2v = (0..n)
        .map(|i| rank_of(s.row(i).iter().copied(), i, s.get(i, i)))
        .collect();
    let v2t = (0..n)
        .map(|j| rank_of((0..n).map(|i| s.get(i, j)), j, s.get(j, j)))
        .collect();
    Ok((t2v, v2t))
}

/// Metrics in both directions for diagonal pairing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t2v: MetricsReport,
    pub v2t: MetricsReport,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<5} {:>7} {:>7} {:>7} {:>6} {:>7} {:>7} {:>6}\n",
            "dir", "R@1", "R@5", "R@10", "MdR", "MnR", "Rsum", "n"
        );
        for r in [&self.t2v, &self.v2t] {
            out.push_str(&format!(
                "{:<5} {:>7.2} {:>7.2} {:>7.2} {:>6.1} {:>7.2} {:>7.2} {:>6}\n",
                r.direction.name(),
                r.r1,
                r.r5,
                r.r10,
                r.mdr,
                r.mnr,
                r.rsum,
                r.n_queries
            ));
        }
        out
    }
}

pub fn compute_metrics(s: &Tensor) -> Result<EvalReport> {
    let (t2v, v2t) = diagonal_ranks(s)?;
    Ok(EvalReport {
        t2v: MetricsReport::from_ranks(Direction::T2v, &t2v)?,
        v2t: MetricsReport::from_ranks(Direction::V2t, &v2t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::matrix(n, n, (0..n * n).map(|k| f(k / n, k % n)).collect()).unwrap()
    }

    #[test]
    fn identity_scores_are_perfect() {
        let r = compute_metrics(&square(5, |i, j| (i == j) as u8 as f64)).unwrap();
        for m in [r.t2v, r.v2t] {
            assert_eq!((m.r1, m.mdr, m.mnr, m.rsum), (100.0, 1.0, 1.0, 300.0));
        }
    }

    #[test]
    fn matches_ranked_last() {
        let r = compute_metrics(&square(5, |i, j| if i == j { -1.0 } else { (i + j) as f64 })).unwrap();
        assert_eq!((r.t2v.r1, r.t2v.r5, r.t2v.mnr), (0.0, 100.0, 5.0));
    }

    #[test]
    fn three_queries_with_ranks_one_two_three() {
        let m = MetricsReport::from_ranks(Direction::T2v, &[1, 2, 3]).unwrap();
        assert!((m.r1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!((m.r5, m.mdr, m.mnr), (100.0, 2.0, 2.0));
    }

    #[test]
    fn ties_favor_smaller_index() {
        let s = square(3, |_, _| 0.5);
        let (t2v, v2t) = diagonal_ranks(&s).unwrap();
        assert_eq!(t2v, vec![1, 2, 3]);
        assert_eq!(v2t, vec![1, 2, 3]);
    }

    #[test]
    fn even_median_averages() {
        let m = MetricsReport::from_ranks(Direction::V2t, &[1, 4, 2, 9]).unwrap();
        assert_eq!(m.mdr, 3.0);
    }

    #[test]
    fn non_square_is_rejected() {
        let s = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(compute_metrics(&s), Err(Error::Shape(_))));
    }
}
