use eaglenet::losses::{ce_loss_value, sigmoid_loss_value, SIGMOID_BIAS_INIT, SIGMOID_TAU_P_INIT};
use eaglenet::tensor::Tensor;
use proptest::prelude::*;

fn square(n: usize, vals: &[f64]) -> Tensor {
    Tensor::matrix(n, n, vals[..n * n].to_vec()).unwrap()
}

fn matrix_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..6).prop_flat_map(|n| (Just(n), prop::collection::vec(-1.0f64..1.0, n * n)))
}

proptest! {
    #[test]
    fn ce_ignores_a_common_shift((n, v) in matrix_strategy(), shift in -3.0f64..3.0, scale in 1.0f64..30.0) {
        let s = square(n, &v);
        let shifted = s.map(|x| x + shift / scale);
        let a = ce_loss_value(&s, scale).unwrap();
        let b = ce_loss_value(&shifted, scale).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ce_is_nonnegative((n, v) in matrix_strategy()) {
        prop_assert!(ce_loss_value(&square(n, &v), 14.0).unwrap() >= -1e-12);
    }

    #[test]
    fn single_pair_ce_is_exactly_zero(x in -1.0f64..1.0, scale in 0.5f64..100.0) {
        prop_assert_eq!(ce_loss_value(&square(1, &[x]), scale).unwrap(), 0.0);
    }

    #[test]
    fn sigmoid_rewards_matches_and_punishes_mismatches(
        (n, v) in matrix_strategy(),
        cell in any::<prop::sample::Index>(),
        bump in 0.01f64..0.5,
    ) {
        let s = square(n, &v);
        let k = cell.index(n * n);
        let mut up = s.clone();
        up.data_mut()[k] += bump;
        let base = sigmoid_loss_value(&s, 1.0, -0.5).unwrap();
        let moved = sigmoid_loss_value(&up, 1.0, -0.5).unwrap();
        if k / n == k % n {
            prop_assert!(moved < base);
        } else {
            prop_assert!(moved > base);
        }
    }
}

#[test]
fn sigmoid_is_not_shift_invariant() {
    let s = Tensor::matrix(2, 2, vec![0.3, -0.1, 0.2, 0.5]).unwrap();
    let a = sigmoid_loss_value(&s, SIGMOID_TAU_P_INIT, SIGMOID_BIAS_INIT).unwrap();
    let b = sigmoid_loss_value(&s.map(|x| x + 0.1), SIGMOID_TAU_P_INIT, SIGMOID_BIAS_INIT).unwrap();
    assert!((a - b).abs() > 1e-3);
}

#[test]
fn sigmoid_zero_logit_with_reference_inits() {
    let s0 = -SIGMOID_BIAS_INIT / SIGMOID_TAU_P_INIT.exp();
    assert!((s0 - 0.10965).abs() < 1e-5);
    let l = sigmoid_loss_value(&Tensor::matrix(1, 1, vec![s0]).unwrap(), SIGMOID_TAU_P_INIT, SIGMOID_BIAS_INIT).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn sigmoid_normalizes_by_batch_not_pairs() {
    // Every logit zero: B² softplus(0) terms divided by B.
    let s = Tensor::zeros(&[3, 3]);
    let l = sigmoid_loss_value(&s, 0.0, 0.0).unwrap();
    assert!((l - 3.0 * 2f64.ln()).abs() < 1e-12);
}
