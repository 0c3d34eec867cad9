//! Randomized checks over many small instances, shared by the property
//! tests and the acceptance suite. Each returns the worst deviation seen.

use eaglenet::config::{FusionMode, GraphKind};
use eaglenet::eam::{langevin_sample, LangevinConfig, QuadraticEnergy, ReplayBuffer};
use eaglenet::error::Result;
use eaglenet::frl::{aggregate_enriched_text, graph_forward, GraphParams, TextFrameGraph};
use eaglenet::fusion::{fuse_frames, FusionParams};
use eaglenet::params::ParamStore;
use eaglenet::tensor::Tensor;
use eaglenet::Rng;

use crate::oracle::{dense_aggregate, dense_fusion, dense_graph, max_abs_diff, to_mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphDims {
    pub d: usize,
    pub s: usize,
    pub m: usize,
    pub heads: usize,
    pub layers: usize,
}

impl GraphDims {
    /// Small random sizes: d in 2..=8, S in 0..=4, M in 1..=5, H and L in 1..=3.
    pub fn random(rng: &mut Rng) -> Self {
        Self {
            d: 2 + rng.below(7),
            s: rng.below(5),
            m: 1 + rng.below(5),
            heads: 1 + rng.below(3),
            layers: 1 + rng.below(3),
        }
    }
}

pub struct GraphCase {
    pub store: ParamStore,
    pub params: GraphParams,
    pub graph: TextFrameGraph,
}

/// Graph parameters redrawn so attention is far from uniform: projections
/// `N(0, 1/d_in)`, edge projector and bias `N(0, 1)`. Nodes are `N(0, 1)`.
pub fn graph_case(kind: GraphKind, dims: GraphDims, seed: u64) -> Result<GraphCase> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let params = GraphParams::init(&mut store, kind, dims.d, dims.m, dims.heads, dims.layers, false, &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let std = if p.name.contains("psi") { 1.0 } else { 1.0 / (p.tensor.rows() as f64).sqrt() };
        let fresh = rng.normal_vec(p.tensor.len(), std);
        p.tensor.data_mut().copy_from_slice(&fresh);
    }
    let n = 1 + dims.s + dims.m;
    let graph = TextFrameGraph {
        x: Tensor::matrix(n, dims.d, rng.normal_vec(n * dims.d, 1.0))?,
        s: dims.s,
        m: dims.m,
    };
    Ok(GraphCase { store, params, graph })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionStats {
    pub graphs: usize,
    /// Worst `|Σ_j α_ij − 1|` over rows with nonempty support.
    pub alpha_row_err: f64,
    /// Largest entry in a row whose support is empty (should be 0).
    pub empty_row_mass: f64,
    /// Most negative text weight (0 when all are nonnegative).
    pub w_min: f64,
    /// Worst `|Σ w − 1|`.
    pub w_sum_err: f64,
    /// Graphs with S=0 and how many of them returned `t` exactly.
    pub s0_graphs: usize,
    pub s0_exact: usize,
}

impl AttentionStats {
    pub fn holds(&self, tol: f64) -> bool {
        self.alpha_row_err <= tol
            && self.empty_row_mass == 0.0
            && self.w_min >= 0.0
            && self.w_sum_err <= tol
            && self.s0_graphs > 0
            && self.s0_exact == self.s0_graphs
    }
}

/// Attention and aggregation invariants over `graphs` random graphs,
/// alternating RGAT and GAT; every fourth graph has S=0.
pub fn attention_invariants(graphs: usize, seed: u64) -> Result<AttentionStats> {
    let mut rng = Rng::new(seed);
    let mut st = AttentionStats { graphs, ..Default::default() };
    for g in 0..graphs {
        let kind = if g % 2 == 0 { GraphKind::Rgat } else { GraphKind::Gat };
        let mut dims = GraphDims::random(&mut rng);
        if g % 4 == 0 {
            dims.s = 0;
        }
        let case = graph_case(kind, dims, rng.next_u64())?;
        let res = graph_forward(&case.store, &case.params, &case.graph)?;
        let texts = 1 + dims.s;
        for (_, rel, _, alpha) in &res.alphas {
            for i in 0..case.graph.n() {
                let row = alpha.row(i);
                let has_support = (0..case.graph.n()).any(|j| rel.connects(texts, i, j));
                if has_support {
                    st.alpha_row_err = st.alpha_row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                } else {
                    st.empty_row_mass = row.iter().fold(st.empty_row_mass, |a, &x| a.max(x.abs()));
                }
            }
        }
        let (t_gen, w) = aggregate_enriched_text(&res.tf_logits, &case.graph.x, dims.s, dims.m)?;
        st.w_min = w.iter().fold(st.w_min, |a, &x| a.min(x));
        st.w_sum_err = st.w_sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        if dims.s == 0 {
            st.s0_graphs += 1;
            if t_gen.as_slice() == case.graph.x.row(0) {
                st.s0_exact += 1;
            }
        }
    }
    Ok(st)
}

/// Largest absolute difference between the engine and the dense
/// transcription over nodes, final text-frame logits, every α, and the
/// enriched text and its weights, across `cases` random instances.
pub fn graph_oracle_deviation(kind: GraphKind, cases: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let dims = GraphDims::random(&mut rng);
        let case = graph_case(kind, dims, rng.next_u64())?;
        let got = graph_forward(&case.store, &case.params, &case.graph)?;
        let x = to_mat(&case.graph.x);
        let want = dense_graph(&case.store, &case.params, &x, dims.s, dims.m);
        worst = worst.max(max_abs_diff(&to_mat(&got.nodes), &want.nodes));
        assert_eq!(got.tf_logits.len(), want.tf_logits.len());
        for (a, b) in got.tf_logits.iter().zip(&want.tf_logits) {
            worst = worst.max(max_abs_diff(a, b));
        }
        assert_eq!(got.alphas.len(), want.alphas.len());
        for (a, b) in got.alphas.iter().zip(&want.alphas) {
            assert_eq!((a.0, a.1, a.2), (b.0, b.1, b.2));
            worst = worst.max(max_abs_diff(&to_mat(&a.3), &b.3));
        }
        let (t, w) = aggregate_enriched_text(&got.tf_logits, &case.graph.x, dims.s, dims.m)?;
        let (t_ref, w_ref) = dense_aggregate(&want.tf_logits, &x, dims.s, dims.m);
        worst = worst.max(max_abs_diff(&vec![t, w], &vec![t_ref, w_ref]));
    }
    Ok(worst)
}

/// As [`graph_oracle_deviation`] for frame fusion with every parameter,
/// layer-norm gains included, redrawn from `N(0, 1)`.
pub fn fusion_oracle_deviation(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = 2 + rng.below(7);
        let d_p = 1 + rng.below(8);
        let m = 1 + rng.below(5);
        let mut store = ParamStore::new();
        let fp = FusionParams::init(&mut store, d, d_p, FusionMode::Attention, &mut rng)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = &mut store.get_mut(id).tensor;
            let fresh = rng.normal_vec(t.len(), 1.0);
            t.data_mut().copy_from_slice(&fresh);
        }
        let frames = Tensor::matrix(m, d, rng.normal_vec(m * d, 1.0))?;
        let t = Tensor::vector(rng.normal_vec(d, 1.0));
        let (v, a) = fuse_frames(&store, &fp, &frames, &t, 0.0, None)?;
        let (v_ref, a_ref) = dense_fusion(&store, &fp, &to_mat(&frames), t.data());
        let a = a.expect("attention mode reports weights");
        worst = worst.max(max_abs_diff(&vec![v.data().to_vec(), a.data().to_vec()], &vec![v_ref, a_ref]));
    }
    Ok(worst)
}

/// Per-coordinate variance after `k` Langevin steps on `E = ½‖x‖²` from
/// the origin, pooled over `chains` chains (each a 1-d text plus a 1-d
/// frame, so `2·chains` coordinates).
pub fn langevin_variance(eta: f64, sigma2: f64, k: usize, chains: usize, seed: u64) -> Result<f64> {
    let t0 = Tensor::zeros(&[chains, 1]);
    let f0 = Tensor::zeros(&[chains, 1]);
    let cfg = LangevinConfig { k, eta, sigma2 };
    let (t, f) = langevin_sample(&QuadraticEnergy, &t0, &f0, 1, &cfg, &mut Rng::new(seed))?;
    let xs: Vec<f64> = t.data().iter().chain(f.data()).copied().collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Ok(xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Stationary variance of `x ← (1−η)x + N(0, σ²)`.
pub fn langevin_theory(eta: f64, sigma2: f64) -> f64 {
    sigma2 / (2.0 * eta - eta * eta)
}

/// Fraction of `draws` text initializations taken from a nonempty buffer.
pub fn reuse_fraction(reuse_prob: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut buf = ReplayBuffer::new(16, reuse_prob);
    for _ in 0..16 {
        buf.push(rng.uniform_vec(4, -1.0, 1.0), rng.uniform_vec(8, -1.0, 1.0));
    }
    let reused = (0..draws).filter(|_| buf.draw_init(&mut rng, 2, 4).2.text_reused).count();
    reused as f64 / draws as f64
}
