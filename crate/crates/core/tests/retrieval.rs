use eaglenet::config::RunConfig;
use eaglenet::dataset::{synth_generate, Split, SynthSpec};
use eaglenet::error::Error;
use eaglenet::model::Model;
use eaglenet::retrieval::{compute_metrics, diagonal_ranks, score_all};
use eaglenet::tensor::Tensor;
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Tensor> {
    (1usize..12).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Tensor::matrix(n, n, v).unwrap())
    })
}

proptest! {
    #[test]
    fn metrics_are_ordered_and_bounded(s in scores()) {
        let n = s.rows() as f64;
        let r = compute_metrics(&s).unwrap();
        for m in [r.t2v, r.v2t] {
            prop_assert!(0.0 <= m.r1 && m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0);
            prop_assert!(1.0 <= m.mdr && m.mdr <= n);
            prop_assert!(1.0 <= m.mnr && m.mnr <= n);
            prop_assert!((m.rsum - (m.r1 + m.r5 + m.r10)).abs() < 1e-9);
            prop_assert_eq!(m.n_queries, s.rows());
        }
    }

    #[test]
    fn ranks_are_a_function_of_pairing_not_order(s in scores(), seed in any::<u64>()) {
        let n = s.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        eaglenet::Rng::new(seed).shuffle(&mut perm);
        let p = Tensor::matrix(n, n, (0..n * n).map(|k| s.get(perm[k / n], perm[k % n])).collect()).unwrap();
        let (t_a, v_a) = diagonal_ranks(&s).unwrap();
        let (t_b, v_b) = diagonal_ranks(&p).unwrap();
        // Ties break by index, so only tie-free matrices keep exact ranks.
        let mut flat = s.data().to_vec();
        flat.sort_by(f64::total_cmp);
        prop_assume!(flat.windows(2).all(|w| w[0] != w[1]));
        for i in 0..n {
            prop_assert_eq!(t_b[i], t_a[perm[i]]);
            prop_assert_eq!(v_b[i], v_a[perm[i]]);
        }
    }

    #[test]
    fn transposing_swaps_directions(s in scores()) {
        let a = compute_metrics(&s).unwrap();
        let b = compute_metrics(&s.transpose()).unwrap();
        prop_assert_eq!(a.t2v.r1, b.v2t.r1);
        prop_assert_eq!(a.v2t.mnr, b.t2v.mnr);
    }

    #[test]
    fn dominant_diagonal_is_perfect(s in scores()) {
        let n = s.rows();
        let mut d = s.clone();
        for i in 0..n {
            d.set(i, i, 10.0);
        }
        let r = compute_metrics(&d).unwrap();
        prop_assert_eq!(r.t2v.r1, 100.0);
        prop_assert_eq!(r.v2t.mdr, 1.0);
    }
}

fn small_model_and_data() -> (Model, Tensor, Tensor) {
    let mut cfg = RunConfig::default();
    cfg.frl.num_candidates = 3;
    cfg.frl.heads = 2;
    cfg.model.init_seed = 4;
    let spec = SynthSpec { n_pairs: 5, dim: 8, frames: 3, noise: 0.5, drift: 0.5, seed: 8 };
    let b = synth_generate(&spec, Split::Test).unwrap().all();
    (Model::new(&cfg, 8, 3).unwrap(), b.texts, b.frames)
}

#[test]
fn scores_do_not_depend_on_chunking() {
    let (model, texts, frames) = small_model_and_data();
    let whole = score_all(&model, &texts, &frames, 3, 1000).unwrap();
    for chunk in [1, 4, 7] {
        assert_eq!(score_all(&model, &texts, &frames, 3, chunk).unwrap(), whole);
    }
    assert!(whole.data().iter().all(|s| (-1.0..=1.0).contains(s)));
}

#[test]
fn reordering_videos_reorders_columns() {
    let (model, texts, frames) = small_model_and_data();
    let m = 3;
    let perm = [3usize, 0, 4, 1, 2];
    let rows: Vec<&[f64]> = perm
        .iter()
        .flat_map(|&v| (0..m).map(move |j| v * m + j))
        .map(|r| frames.row(r))
        .collect();
    let permuted = Tensor::stack_rows(&rows).unwrap();
    let a = score_all(&model, &texts, &frames, 0, 64).unwrap();
    let b = score_all(&model, &texts, &permuted, 0, 64).unwrap();
    for i in 0..5 {
        for (k, &v) in perm.iter().enumerate() {
            assert!((b.get(i, k) - a.get(i, v)).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_or_ragged_inputs_are_rejected() {
    let (model, texts, frames) = small_model_and_data();
    assert!(matches!(
        score_all(&model, &Tensor::zeros(&[0, 8]), &frames, 0, 8),
        Err(Error::NoQueries)
    ));
    let ragged = frames.slice_rows(0, 4);
    assert!(matches!(score_all(&model, &texts, &ragged, 0, 8), Err(Error::Shape(_))));
}
