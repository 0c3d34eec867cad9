//! Fine-grained relationship learning: a text-frame graph over the text,
//! its stochastic candidates and the frames, processed by relational graph
//! attention, whose final text-frame edge weights pick the enriched text.
//!
//! Node order inside a graph is `[t, cand_1..cand_S, f_1..f_M]`. All batched
//! functions take `P` graphs stacked as `[P·n, ·]` with `n = 1 + S + M`.

use std::sync::Arc;

use crate::autodiff::{RowMask, Tape, Var};
use crate::config::GraphKind;
use crate::error::{Error, Result};
use crate::layers::dropout;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const PE_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    TextText,
    FrameFrame,
    TextFrame,
    /// Every node pair, for the homogeneous GAT.
    All,
}

impl Relation {
    pub fn name(self) -> &'static str {
        match self {
            Relation::TextText => "tt",
            Relation::FrameFrame => "ff",
            Relation::TextFrame => "tf",
            Relation::All => "all",
        }
    }

    /// Whether `(i, j)` is an edge in a graph with `texts = 1 + S` text nodes.
    pub fn connects(self, texts: usize, i: usize, j: usize) -> bool {
        let (ti, tj) = (i < texts, j < texts);
        match self {
            Relation::TextText => ti && tj,
            Relation::FrameFrame => !ti && !tj,
            Relation::TextFrame => ti != tj,
            Relation::All => true,
        }
    }

    pub fn mask(self, s: usize, m: usize) -> RowMask {
        let n = 1 + s + m;
        RowMask::from_fn(n, n, |i, j| self.connects(1 + s, i, j))
    }
}

/// One text-frame graph with explicit adjacencies.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFrameGraph {
    /// Node matrix `[n, d]`.
    pub x: Tensor,
    pub s: usize,
    pub m: usize,
}

impl TextFrameGraph {
    pub fn n(&self) -> usize {
        1 + self.s + self.m
    }

    pub fn text_range(&self) -> std::ops::Range<usize> {
        0..1 + self.s
    }

    pub fn frame_range(&self) -> std::ops::Range<usize> {
        1 + self.s..self.n()
    }

    /// Dense `n×n` adjacency of one relation.
    pub fn adjacency(&self, rel: Relation) -> Vec<Vec<bool>> {
        let n = self.n();
        (0..n)
            .map(|i| (0..n).map(|j| rel.connects(1 + self.s, i, j)).collect())
            .collect()
    }
}

/// Stack `[t, candidates, f_j + PE_j]` into a graph.
pub fn build_graph(t: &[f64], candidates: &[Vec<f64>], frames: &Tensor, pe: &Tensor) -> Result<TextFrameGraph> {
    let frames = frames.as_matrix();
    let d = t.len();
    if frames.cols() != d || pe.shape() != frames.shape() || candidates.iter().any(|c| c.len() != d) {
        return Err(Error::Shape(format!(
            "build_graph: t [{d}], frames {:?}, PE {:?}",
            frames.shape(),
            pe.shape()
        )));
    }
    let mut rows: Vec<f64> = Vec::with_capacity((1 + candidates.len() + frames.rows()) * d);
    rows.extend_from_slice(t);
    for c in candidates {
        rows.extend_from_slice(c);
    }
    for (f, p) in frames.data().iter().zip(pe.data()) {
        rows.push(f + p);
    }
    Ok(TextFrameGraph {
        x: Tensor::matrix(1 + candidates.len() + frames.rows(), d, rows)?,
        s: candidates.len(),
        m: frames.rows(),
    })
}

/// Parameters of one relation inside one layer.
#[derive(Clone, Debug)]
pub struct RelationParams {
    pub relation: Relation,
    /// All heads side by side, `[d_in, H·d]`.
    pub w: ParamId,
    /// Edge projector weight `[2d, 1]`, shared across heads.
    pub psi_w: ParamId,
    /// Edge projector bias `[1, 1]`.
    pub psi_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct GraphLayer {
    pub relations: Vec<RelationParams>,
    /// Residual projection `[d_in, d_out]`; absent for GAT.
    pub w_out: Option<ParamId>,
    pub d_in: usize,
    pub last: bool,
}

#[derive(Clone, Debug)]
pub struct GraphParams {
    pub kind: GraphKind,
    pub heads: usize,
    pub d: usize,
    pub layers: Vec<GraphLayer>,
    /// Positional embedding added to frame nodes, `[M, d]`.
    pub pe: ParamId,
}

/// Per-layer attention weights, kept for inspection.
pub struct AttentionRecord {
    pub layer: usize,
    pub relation: Relation,
    pub head: usize,
    /// `[P·n, n]`
    pub alpha: Var,
}

pub struct GraphOutput {
    /// Final node matrix `[P·n, d]`; `None` when only logits were requested.
    pub nodes: Option<Var>,
    /// Raw final-layer text-frame logits per head, `[P·n, n]`; only entries
    /// with a text row and a frame column are meaningful.
    pub tf_logits: Vec<Var>,
    pub alphas: Vec<AttentionRecord>,
}

impl GraphParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        kind: GraphKind,
        d: usize,
        m: usize,
        heads: usize,
        layers: usize,
        drop_f2f: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads < 1 || layers < 1 {
            return Err(Error::InvalidArgument("graph needs heads >= 1 and layers >= 1".into()));
        }
        let relations: Vec<Relation> = match kind {
            GraphKind::Gat => vec![Relation::All],
            GraphKind::Rgat if drop_f2f => vec![Relation::TextText, Relation::TextFrame],
            GraphKind::Rgat => vec![Relation::TextText, Relation::FrameFrame, Relation::TextFrame],
        };
        let pe = store.register_normal("frl.pe", m, d, PE_INIT_STD, rng)?;
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let last = l + 1 == layers;
            let d_in = if l == 0 { d } else { heads * d };
            let w_std = 1.0 / (d_in as f64).sqrt();
            let psi_std = 1.0 / ((2 * d) as f64).sqrt();
            let mut rels = Vec::new();
            for &r in &relations {
                let base = format!("frl.l{l}.{}", r.name());
                rels.push(RelationParams {
                    relation: r,
                    w: store.register_normal(&format!("{base}.w"), d_in, heads * d, w_std, rng)?,
                    psi_w: store.register_normal(&format!("{base}.psi.w"), 2 * d, 1, psi_std, rng)?,
                    psi_b: store.register(&format!("{base}.psi.b"), Tensor::scalar(0.0), false)?,
                });
            }
            let w_out = match kind {
                GraphKind::Rgat => Some(store.register_normal(
                    &format!("frl.l{l}.w_out"),
                    d_in,
                    if last { d } else { heads * d },
                    w_std,
                    rng,
                )?),
                GraphKind::Gat => None,
            };
            out.push(GraphLayer {
                relations: rels,
                w_out,
                d_in,
                last,
            });
        }
        Ok(Self {
            kind,
            heads,
            d,
            layers: out,
            pe,
        })
    }

    /// Run the stack on `P` graphs `x: [P·n, d]`. With `full = false` the
    /// final layer computes only its text-frame logits, which is all the
    /// enriched text needs. `rng` enables attention dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        p: usize,
        s: usize,
        m: usize,
        drop_rate: f64,
        rng: Option<&mut Rng>,
        full: bool,
    ) -> Result<GraphOutput> {
        self.forward_gathered(ctx, x, None, p, s, m, drop_rate, rng, full)
    }

    /// As [`forward`](Self::forward) with node matrix `X = base[order]`.
    /// Rows shared by many graphs (a text against every video, a video's
    /// frames against every text) then go through the first layer's
    /// projections once.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_gathered(
        &self,
        ctx: &mut Ctx,
        base: Var,
        order: Option<Arc<Vec<usize>>>,
        p: usize,
        s: usize,
        m: usize,
        drop_rate: f64,
        mut rng: Option<&mut Rng>,
        full: bool,
    ) -> Result<GraphOutput> {
        let n = 1 + s + m;
        let (base_rows, d_x) = ctx.tape.shape(base);
        let rows = order.as_ref().map_or(base_rows, |o| o.len());
        if rows != p * n || d_x != self.d || order.as_ref().is_some_and(|o| o.iter().any(|&i| i >= base_rows)) {
            return Err(Error::Shape(format!(
                "graph input [{rows},{d_x}] for {p} graphs of {n} nodes, d={}",
                self.d
            )));
        }
        let hds = self.heads;
        let d = self.d;
        // `h = hb[hord]`; only the first layer sees a gathered input.
        let mut hb = base;
        let mut hord = order;
        let mut tf_logits = Vec::new();
        let mut alphas = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let logits_only = layer.last && !full;
            let project = |tape: &mut Tape, w: Var| -> Result<Var> {
                let y = tape.matmul(hb, w)?;
                match &hord {
                    Some(o) => tape.gather_rows(y, o.clone()),
                    None => Ok(y),
                }
            };
            let mut acc: Vec<Option<Var>> = vec![None; hds];
            for rp in &layer.relations {
                let keep_logits = layer.last
                    && matches!(rp.relation, Relation::TextFrame | Relation::All);
                if logits_only && !keep_logits {
                    continue;
                }
                let w = ctx.param(rp.w);
                let psi = ctx.param(rp.psi_w);
                let b = ctx.param(rp.psi_b);
                let tape = &mut ctx.tape;
                // Columns (a1, a2): the source and target halves of ψ.
                let a12 = tape.reshape(psi, 2, d)?;
                let a12 = tape.transpose(a12);
                // Per head, columns 2h and 2h+1 of `uv` hold u and v.
                let (z, uv) = if logits_only {
                    // Only ψ-projections are needed: fold them into W.
                    let mut wa = Vec::with_capacity(hds);
                    for hi in 0..hds {
                        let wh = tape.slice_cols(w, hi * d, d)?;
                        wa.push(tape.matmul(wh, a12)?);
                    }
                    let wa = tape.concat_cols(&wa)?;
                    (None, project(tape, wa)?)
                } else {
                    let z = project(tape, w)?;
                    let zr = tape.reshape(z, p * n * hds, d)?;
                    let uv = tape.matmul(zr, a12)?;
                    (Some(z), tape.reshape(uv, p * n, 2 * hds)?)
                };
                let mask = rp.relation.mask(s, m);
                for (hi, slot) in acc.iter_mut().enumerate() {
                    let tape = &mut ctx.tape;
                    let uh = tape.slice_cols(uv, 2 * hi, 1)?;
                    let vh = tape.slice_cols(uv, 2 * hi + 1, 1)?;
                    let e = tape.edge_logits(uh, vh, n)?;
                    let e = tape.add_scalar(e, b)?;
                    if keep_logits {
                        tf_logits.push(e);
                    }
                    let Some(z) = z else { continue };
                    let act = tape.leaky_relu(e, LEAKY_SLOPE);
                    let alpha = tape.softmax_rows(act, Some(&mask))?;
                    alphas.push(AttentionRecord {
                        layer: li,
                        relation: rp.relation,
                        head: hi,
                        alpha,
                    });
                    let alpha_used = match rng.as_deref_mut() {
                        Some(r) => dropout(tape, alpha, drop_rate, r)?,
                        None => alpha,
                    };
                    let zh = tape.slice_cols(z, hi * d, d)?;
                    let msg = tape.block_matmul(alpha_used, zh, p)?;
                    *slot = Some(match *slot {
                        Some(prev) => tape.add(prev, msg)?,
                        None => msg,
                    });
                }
            }
            if logits_only {
                return Ok(GraphOutput {
                    nodes: None,
                    tf_logits,
                    alphas,
                });
            }
            let heads: Vec<Var> = acc
                .into_iter()
                .map(|a| a.ok_or_else(|| Error::InvalidArgument("graph layer has no relations".into())))
                .collect::<Result<_>>()?;
            let combined = if layer.last {
                let mut sum = heads[0];
                for &hv in &heads[1..] {
                    sum = ctx.tape.add(sum, hv)?;
                }
                ctx.tape.scale(sum, 1.0 / hds as f64)
            } else {
                ctx.tape.concat_cols(&heads)?
            };
            let pre = match layer.w_out {
                Some(wo) => {
                    let wo = ctx.param(wo);
                    let res = project(&mut ctx.tape, wo)?;
                    ctx.tape.add(res, combined)?
                }
                None => combined,
            };
            hb = ctx.tape.relu(pre);
            hord = None;
        }
        Ok(GraphOutput {
            nodes: Some(hb),
            tf_logits,
            alphas,
        })
    }
}

/// Enriched text for `P` graphs: head-averaged text-frame logits, averaged
/// over frames, softmaxed over the `1+S` text nodes, then used to mix the
/// text rows of `x`. Returns `t_gen: [P, d]` and weights `w: [P, 1+S]`.
pub fn batched_aggregate(
    ctx: &mut Ctx,
    tf_logits: &[Var],
    x: Var,
    p: usize,
    s: usize,
    m: usize,
) -> Result<(Var, Var)> {
    if tf_logits.is_empty() || m == 0 {
        return Err(Error::Shape("aggregate needs logits and at least one frame".into()));
    }
    let n = 1 + s + m;
    let texts = 1 + s;
    let mut flat = Vec::with_capacity(p * texts * m);
    for g in 0..p {
        for i in 0..texts {
            for j in 0..m {
                flat.push((g * n + i) * n + texts + j);
            }
        }
    }
    let flat = Arc::new(flat);
    let tape = &mut ctx.tape;
    let mut sum = None;
    for &e in tf_logits {
        let sel = tape.gather_flat(e, flat.clone(), p * texts, m)?;
        sum = Some(match sum {
            Some(prev) => tape.add(prev, sel)?,
            None => sel,
        });
    }
    let mean_heads = tape.scale(sum.expect("nonempty"), 1.0 / tf_logits.len() as f64);
    let per_text = tape.sum_cols(mean_heads);
    let per_text = tape.scale(per_text, 1.0 / m as f64);
    let per_text = tape.reshape(per_text, p, texts)?;
    let w = tape.softmax_rows(per_text, None)?;
    let text_rows: Vec<usize> = (0..p).flat_map(|g| (0..texts).map(move |i| g * n + i)).collect();
    let xt = tape.gather_rows(x, Arc::new(text_rows))?;
    let t_gen = tape.block_matmul(w, xt, p)?;
    Ok((t_gen, w))
}

/// Single-graph result of the graph stack.
#[derive(Clone, Debug)]
pub struct GraphResult {
    /// Final node matrix `[n, d]`.
    pub nodes: Tensor,
    /// Raw final-layer logits `e[h][i][j]` for text node `i`, frame `j`.
    pub tf_logits: Vec<Vec<Vec<f64>>>,
    /// `(layer, relation, head, α [n,n])`.
    pub alphas: Vec<(usize, Relation, usize, Tensor)>,
}

/// Evaluate the graph stack on one graph (inference mode).
pub fn graph_forward(store: &ParamStore, params: &GraphParams, graph: &TextFrameGraph) -> Result<GraphResult> {
    let mut ctx = Ctx::new(store);
    let x = ctx.tape.constant(graph.x.clone());
    let out = params.forward(&mut ctx, x, 1, graph.s, graph.m, 0.0, None, true)?;
    let n = graph.n();
    let tf_logits = out
        .tf_logits
        .iter()
        .map(|&e| {
            let e = ctx.value(e);
            graph
                .text_range()
                .map(|i| graph.frame_range().map(|j| e.get(i, j)).collect())
                .collect()
        })
        .collect();
    let alphas = out
        .alphas
        .iter()
        .map(|a| (a.layer, a.relation, a.head, ctx.value(a.alpha).clone()))
        .collect();
    let nodes = ctx.value(out.nodes.expect("full forward")).clone();
    debug_assert_eq!(nodes.rows(), n);
    Ok(GraphResult {
        nodes,
        tf_logits,
        alphas,
    })
}

/// `t_gen` and text weights `w` from per-head logits `e[h][i][j]` over the
/// text rows of `x` (`[n, d]`, text rows first).
pub fn aggregate_enriched_text(tf_logits: &[Vec<Vec<f64>>], x: &Tensor, s: usize, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let heads = tf_logits.len();
    if heads == 0 || tf_logits.iter().any(|e| e.len() != 1 + s || e.iter().any(|r| r.len() != m)) {
        return Err(Error::Shape("aggregate: logits must be [H][1+S][M]".into()));
    }
    if x.rows() < 1 + s {
        return Err(Error::Shape("aggregate: node matrix too short".into()));
    }
    let n = 1 + s + m;
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store);
    let mut dense = Vec::with_capacity(heads);
    for e in tf_logits {
        let mut t = Tensor::zeros(&[n, n]);
        for (i, row) in e.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t.set(i, 1 + s + j, v);
            }
        }
        dense.push(ctx.tape.constant(t));
    }
    let mut xm = Tensor::zeros(&[n, x.cols()]);
    for i in 0..(1 + s) {
        xm.row_mut(i).copy_from_slice(x.row(i));
    }
    let xv = ctx.tape.constant(xm);
    let (t_gen, w) = batched_aggregate(&mut ctx, &dense, xv, 1, s, m)?;
    Ok((ctx.value(t_gen).data().to_vec(), ctx.value(w).data().to_vec()))
}
