//! Literal dense-matrix transcriptions of the graph layers, the enriched
//! text aggregation and the frame fusion. Everything here works on plain
//! nested vectors with explicit loops so that it shares no code with the
//! batched engine it is compared against.

use eaglenet::config::GraphKind;
use eaglenet::frl::{GraphParams, Relation};
use eaglenet::fusion::FusionParams;
use eaglenet::params::ParamStore;
use eaglenet::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let t = t.as_matrix();
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn param(store: &ParamStore, name: &str) -> Mat {
    to_mat(&store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).tensor)
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let k = b.len();
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|p| row[p] * b[p][j]).sum()).collect()
        })
        .collect()
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.iter().map(|e| e / z).collect()
}

fn is_text(i: usize, s: usize) -> bool {
    i <= s
}

/// Adjacency for one relation, text nodes first.
pub fn adjacency(rel: Relation, s: usize, m: usize) -> Vec<Vec<bool>> {
    let n = 1 + s + m;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match rel {
                    Relation::TextText => is_text(i, s) && is_text(j, s),
                    Relation::FrameFrame => !is_text(i, s) && !is_text(j, s),
                    Relation::TextFrame => is_text(i, s) != is_text(j, s),
                    Relation::All => true,
                })
                .collect()
        })
        .collect()
}

pub struct DenseGraphResult {
    pub nodes: Mat,
    /// `e[h][i][j]`, text node `i`, frame `j`, raw final-layer logits.
    pub tf_logits: Vec<Mat>,
    /// `(layer, relation, head, α)` in evaluation order.
    pub alphas: Vec<(usize, Relation, usize, Mat)>,
}

/// Relational (or homogeneous) graph attention written out node by node:
/// `e_ij = ψ([W h_i ‖ W h_j])`, `α_i = softmax_{j∈N_i}(LeakyReLU(e_i))`,
/// `h'_i = ReLU(W_out h_i + ⊕_h Σ_r Σ_j α_ij W h_j)` with concatenation
/// across heads except in the final layer, which averages them.
pub fn dense_graph(store: &ParamStore, gp: &GraphParams, x: &Mat, s: usize, m: usize) -> DenseGraphResult {
    let n = 1 + s + m;
    assert_eq!(x.len(), n);
    let d = gp.d;
    let heads = gp.heads;
    let rels: Vec<Relation> = gp.layers[0].relations.iter().map(|r| r.relation).collect();
    let mut h = x.clone();
    let mut tf_logits = Vec::new();
    let mut alphas = Vec::new();
    for (l, layer) in gp.layers.iter().enumerate() {
        let mut per_head: Vec<Mat> = vec![vec![vec![0.0; d]; n]; heads];
        for &rel in &rels {
            let base = format!("frl.l{l}.{}", rel.name());
            let w = param(store, &format!("{base}.w"));
            let psi: Vec<f64> = param(store, &format!("{base}.psi.w")).into_iter().flatten().collect();
            let b = param(store, &format!("{base}.psi.b"))[0][0];
            let adj = adjacency(rel, s, m);
            for (hi, acc) in per_head.iter_mut().enumerate() {
                let z = matmul(&h, &cols(&w, hi * d, d));
                let e: Mat = (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| {
                                let mut cat = z[i].clone();
                                cat.extend_from_slice(&z[j]);
                                cat.iter().zip(&psi).map(|(a, p)| a * p).sum::<f64>() + b
                            })
                            .collect()
                    })
                    .collect();
                if layer.last && matches!(rel, Relation::TextFrame | Relation::All) {
                    tf_logits.push((0..=s).map(|i| (1 + s..n).map(|j| e[i][j]).collect()).collect());
                }
                let mut alpha = vec![vec![0.0; n]; n];
                for i in 0..n {
                    let nbrs: Vec<usize> = (0..n).filter(|&j| adj[i][j]).collect();
                    if nbrs.is_empty() {
                        continue;
                    }
                    let a = softmax(&nbrs.iter().map(|&j| leaky(e[i][j])).collect::<Vec<_>>());
                    for (&j, aj) in nbrs.iter().zip(a) {
                        alpha[i][j] = aj;
                        for c in 0..d {
                            acc[i][c] += aj * z[j][c];
                        }
                    }
                }
                alphas.push((l, rel, hi, alpha));
            }
        }
        let combined: Mat = (0..n)
            .map(|i| {
                if layer.last {
                    (0..d)
                        .map(|c| per_head.iter().map(|ph| ph[i][c]).sum::<f64>() / heads as f64)
                        .collect()
                } else {
                    per_head.iter().flat_map(|ph| ph[i].clone()).collect()
                }
            })
            .collect();
        let residual = match gp.kind {
            GraphKind::Rgat => Some(matmul(&h, &param(store, &format!("frl.l{l}.w_out")))),
            GraphKind::Gat => None,
        };
        h = (0..n)
            .map(|i| {
                (0..combined[i].len())
                    .map(|c| {
                        let r = residual.as_ref().map_or(0.0, |r| r[i][c]);
                        (r + combined[i][c]).max(0.0)
                    })
                    .collect()
            })
            .collect();
    }
    DenseGraphResult {
        nodes: h,
        tf_logits,
        alphas,
    }
}

/// Head mean, frame mean, softmax over text nodes, convex mix of text rows.
pub fn dense_aggregate(tf_logits: &[Mat], x: &Mat, s: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let heads = tf_logits.len() as f64;
    let scores: Vec<f64> = (0..=s)
        .map(|i| {
            (0..m)
                .map(|j| tf_logits.iter().map(|e| e[i][j]).sum::<f64>() / heads)
                .sum::<f64>()
                / m as f64
        })
        .collect();
    let w = softmax(&scores);
    let d = x[0].len();
    let t = (0..d).map(|c| (0..=s).map(|i| w[i] * x[i][c]).sum()).collect();
    (t, w)
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
        .collect()
}

/// Cross-attention fusion: `a = softmax(q Kᵀ/√d_p)` with `q = t W_Q`,
/// `K = F W_K`, `V = F W_V`; `z = LN((a V) W_O)`; `v = LN(FC(z) + z)`.
/// Returns `(v, a)`.
pub fn dense_fusion(store: &ParamStore, fp: &FusionParams, frames: &Mat, t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = |n: &str| param(store, n);
    let q = matmul(&vec![t.to_vec()], &p("fusion.wq"))[0].clone();
    let k = matmul(frames, &p("fusion.wk"));
    let v = matmul(frames, &p("fusion.wv"));
    let scale = (fp.d_p as f64).sqrt();
    let logits: Vec<f64> = k
        .iter()
        .map(|kj| kj.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    let a = softmax(&logits);
    let pooled: Vec<f64> = (0..fp.d_p)
        .map(|c| a.iter().zip(&v).map(|(aj, vj)| aj * vj[c]).sum())
        .collect();
    let proj = matmul(&vec![pooled], &p("fusion.wo"))[0].clone();
    let z = layer_norm(&proj, &p("fusion.ln1.g")[0], &p("fusion.ln1.b")[0]);
    let fc = matmul(&vec![z.clone()], &p("fusion.fc.w"))[0].clone();
    let fc_b = &p("fusion.fc.b")[0];
    let res: Vec<f64> = (0..z.len()).map(|c| fc[c] + fc_b[c] + z[c]).collect();
    (layer_norm(&res, &p("fusion.ln2.g")[0], &p("fusion.ln2.b")[0]), a)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
