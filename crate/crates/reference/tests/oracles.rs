use eaglenet::config::GraphKind;
use eaglenet::frl::graph_forward;
use eaglenet_reference::checks::{
    attention_invariants, fusion_oracle_deviation, graph_case, graph_oracle_deviation, GraphDims,
};
use eaglenet_reference::oracle::{dense_graph, max_abs_diff, to_mat};
use proptest::prelude::*;

const ORACLE_TOL: f64 = 1e-10;

#[test]
fn rgat_matches_dense_on_the_reference_shape() {
    let dims = GraphDims { d: 6, s: 2, m: 3, heads: 2, layers: 2 };
    let case = graph_case(GraphKind::Rgat, dims, 42).unwrap();
    let got = graph_forward(&case.store, &case.params, &case.graph).unwrap();
    let want = dense_graph(&case.store, &case.params, &to_mat(&case.graph.x), 2, 3);
    assert!(max_abs_diff(&to_mat(&got.nodes), &want.nodes) < ORACLE_TOL);
    assert_eq!(got.tf_logits.len(), 2);
    assert_eq!(got.alphas.len(), 2 * 3 * 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rgat_matches_dense(seed in any::<u64>()) {
        prop_assert!(graph_oracle_deviation(GraphKind::Rgat, 1, seed).unwrap() < ORACLE_TOL);
    }

    #[test]
    fn gat_matches_dense(seed in any::<u64>()) {
        prop_assert!(graph_oracle_deviation(GraphKind::Gat, 1, seed).unwrap() < ORACLE_TOL);
    }

    #[test]
    fn fusion_matches_dense(seed in any::<u64>()) {
        prop_assert!(fusion_oracle_deviation(1, seed).unwrap() < ORACLE_TOL);
    }

    #[test]
    fn attention_rows_and_text_weights_are_distributions(seed in any::<u64>()) {
        let st = attention_invariants(8, seed).unwrap();
        prop_assert!(st.holds(1e-9), "{st:?}");
    }
}
