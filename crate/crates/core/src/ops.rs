//! Plain (non-recording) kernels used outside the training tape.

use crate::autodiff::{softmax_masked, RowMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax restricted to `mask`, stabilized by row-max subtraction.
pub fn softmax_rows(m: &Tensor, mask: Option<&RowMask>) -> Result<Tensor> {
    let m = m.as_matrix();
    if let Some(mask) = mask {
        if mask.cols() != m.cols() {
            return Err(Error::Shape(format!(
                "mask has {} cols, input {}",
                mask.cols(),
                m.cols()
            )));
        }
        for r in 0..m.rows() {
            if !mask.row(r).iter().any(|&a| a) {
                return Err(Error::EmptySoftmaxSupport);
            }
        }
    }
    if m.cols() == 0 && m.rows() > 0 {
        return Err(Error::EmptySoftmaxSupport);
    }
    Ok(softmax_masked(&m, mask))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `aᵀb / (‖a‖·‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok(a.iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row_vector(v.to_vec())
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let s = softmax_rows(&row(&[0.0, 0.0, 0.0]), None).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let mask = RowMask::new(1, 2, vec![true, false]).unwrap();
        let s = softmax_rows(&row(&[1.0, 1.0]), Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_log_weights() {
        let s = softmax_rows(&row(&[1f64.ln(), 3f64.ln()]), None).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mask = RowMask::new(1, 2, vec![false, false]).unwrap();
        let err = softmax_rows(&row(&[1.0, 2.0]), Some(&mask)).unwrap_err();
        assert_eq!(err.to_string(), "empty softmax support");
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err().to_string(),
            "degenerate vector"
        );
    }
}
