//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass; [`Tape::backward`] then walks the record in reverse and
//! accumulates adjoints. Ops are batched: a stack of `P` independent graphs
//! or pairs lives in one matrix, so shared weights hit one large GEMM.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean support pattern for row softmax. Row `r` of the input uses
/// pattern row `r % period`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMask {
    period: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl RowMask {
    pub fn new(period: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != period * cols || period == 0 {
            return Err(Error::Shape(format!(
                "mask needs {period}x{cols} entries, got {}",
                allowed.len()
            )));
        }
        Ok(Self {
            period,
            cols,
            allowed,
        })
    }

    pub fn from_fn(period: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(period * cols);
        for i in 0..period {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            period,
            cols,
            allowed,
        }
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[(row % self.period) * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let r = row % self.period;
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupReduce {
    Max,
    Min,
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    /// `a_p · b_p` for `blocks` stacked blocks.
    BlockMatMul(Var, Var, usize),
    /// `a_p · b_pᵀ` for `blocks` stacked blocks.
    BlockMatMulBT(Var, Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Arc<Tensor>),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Square(Var),
    SafeRecip(Var, f64),
    SumAll(Var),
    SumCols(Var),
    MeanGroups(Var, usize),
    ReduceGroups(Var, Vec<usize>),
    RowNorm(Var),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    EdgeLogits(Var, Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    GatherFlat(Var, Arc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(what: &str, a: &Tensor, b: &Tensor) -> Result<T> {
    Err(Error::Shape(format!(
        "{what}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    )))
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal shape bookkeeping")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value.into_matrix(), Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.into_matrix(), Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return shape_err("matmul", av, bv);
        }
        let out = av.matmul(bv)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Block-diagonal product: `a` is `[blocks·m, k]`, `b` is `[blocks·k, n]`.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if blocks == 0 || av.rows() % blocks != 0 || bv.rows() != blocks * av.cols() {
            return shape_err("block_matmul", av, bv);
        }
        let (m, k, n) = (av.rows() / blocks, av.cols(), bv.cols());
        let mut out = vec![0.0; blocks * m * n];
        for p in 0..blocks {
            gemm(
                m,
                k,
                n,
                &av.data()[p * m * k..(p + 1) * m * k],
                false,
                &bv.data()[p * k * n..(p + 1) * k * n],
                false,
                &mut out[p * m * n..(p + 1) * m * n],
                false,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(blocks * m, n, out), Op::BlockMatMul(a, b, blocks), ng))
    }

    /// Block product with transposed right factor: `a` is `[blocks·m, k]`,
    /// `b` is `[blocks·n, k]`, output `[blocks·m, n]`.
    pub fn block_matmul_bt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if blocks == 0
            || av.rows() % blocks != 0
            || bv.rows() % blocks != 0
            || av.cols() != bv.cols()
        {
            return shape_err("block_matmul_bt", av, bv);
        }
        let (m, k, n) = (av.rows() / blocks, av.cols(), bv.rows() / blocks);
        let mut out = vec![0.0; blocks * m * n];
        for p in 0..blocks {
            gemm(
                m,
                k,
                n,
                &av.data()[p * m * k..(p + 1) * m * k],
                false,
                &bv.data()[p * n * k..(p + 1) * n * k],
                true,
                &mut out[p * m * n..(p + 1) * m * n],
                false,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(blocks * m, n, out), Op::BlockMatMulBT(a, b, blocks), ng))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(what, av, bv);
        }
        av.zip_map(bv, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return shape_err("add_row", av, bv);
        }
        let n = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let out = mat(av.rows(), n, out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// `a[m,n] ⊙ b[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return shape_err("mul_row", av, bv);
        }
        let n = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x *= y;
            }
        }
        let out = mat(av.rows(), n, out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MulRow(a, b), ng))
    }

    /// `a[m,n] ⊙ s[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.cols() != 1 || sv.rows() != av.rows() {
            return shape_err("mul_col", av, sv);
        }
        let n = av.cols();
        let mut out = av.data().to_vec();
        for (row, &k) in out.chunks_mut(n.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        let out = mat(av.rows(), n, out);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::MulCol(a, s), ng))
    }

    /// `a + s` with `s` a `[1,1]` variable.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return shape_err("add_scalar", self.value(a), sv);
        }
        let k = sv.item();
        let out = self.value(a).map(|x| x + k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::AddScalar(a, s), ng))
    }

    /// `a · s` with `s` a `[1,1]` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return shape_err("mul_scalar", self.value(a), sv);
        }
        let k = sv.item();
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::MulScalar(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    /// Elementwise product with a constant tensor (dropout masks, signs).
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let av = self.value(a);
        if av.len() != c.len() {
            return shape_err("mul_const", av, &c);
        }
        let out = mat(
            av.rows(),
            av.cols(),
            av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        );
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    /// `1/x`, or 0 (with zero derivative) where `|x| < floor`.
    pub fn safe_recip(&mut self, a: Var, floor: f64) -> Var {
        let out = self
            .value(a)
            .map(|x| if x.abs() < floor { 0.0 } else { 1.0 / x });
        let ng = self.ng(a);
        self.push(out, Op::SafeRecip(a, floor), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `[m,n] -> [m,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let out: Vec<f64> = if n == 0 {
            vec![0.0; av.rows()]
        } else {
            av.data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        let out = mat(av.rows(), 1, out);
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Mean over consecutive groups of `group` rows, `[m·g, n] -> [m, n]`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || !av.rows().is_multiple_of(group) {
            return Err(Error::Shape(format!(
                "mean_groups: {} rows not divisible by {group}",
                av.rows()
            )));
        }
        let (m, n) = (av.rows() / group, av.cols());
        let mut out = vec![0.0; m * n];
        for (r, row) in av.data().chunks(n).enumerate() {
            let dst = &mut out[(r / group) * n..(r / group + 1) * n];
            for (d, x) in dst.iter_mut().zip(row) {
                *d += x;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(a);
        Ok(self.push(mat(m, n, out), Op::MeanGroups(a, group), ng))
    }

    /// Per-column max or min over consecutive groups of `group` rows.
    pub fn reduce_groups(&mut self, a: Var, group: usize, how: GroupReduce) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || !av.rows().is_multiple_of(group) {
            return Err(Error::Shape(format!(
                "reduce_groups: {} rows not divisible by {group}",
                av.rows()
            )));
        }
        let (m, n) = (av.rows() / group, av.cols());
        let mut out = vec![0.0; m * n];
        let mut arg = vec![0usize; m * n];
        for g in 0..m {
            for c in 0..n {
                let mut best_idx = g * group * n + c;
                let mut best = av.data()[best_idx];
                for r in 1..group {
                    let idx = (g * group + r) * n + c;
                    let x = av.data()[idx];
                    let better = match how {
                        GroupReduce::Max => x > best,
                        GroupReduce::Min => x < best,
                    };
                    if better {
                        best = x;
                        best_idx = idx;
                    }
                }
                out[g * n + c] = best;
                arg[g * n + c] = best_idx;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(mat(m, n, out), Op::ReduceGroups(a, arg), ng))
    }

    /// Euclidean norm of each row, `[m,n] -> [m,1]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols().max(1);
        let out: Vec<f64> = av
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = mat(av.rows(), 1, out);
        let ng = self.ng(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Row standardization `(x − μ)/√(σ² + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(av.len());
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in av.data().chunks(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        let out = mat(av.rows(), n, out);
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    /// Row softmax, optionally restricted to the support in `mask`.
    /// Rows with empty support produce zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&RowMask>) -> Result<Var> {
        let av = self.value(a);
        if let Some(m) = mask {
            if m.cols() != av.cols() {
                return Err(Error::Shape(format!(
                    "mask has {} cols, input {}",
                    m.cols(),
                    av.cols()
                )));
            }
        }
        let out = softmax_masked(av, mask);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(av.len());
        for row in av.data().chunks(n.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let out = mat(av.rows(), n, out);
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Pairwise sums within blocks of `n` rows:
    /// `out[p·n + i, j] = u[p·n + i] + v[p·n + j]`.
    pub fn edge_logits(&mut self, u: Var, v: Var, n: usize) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.cols() != 1 || uv.shape() != vv.shape() || n == 0 || uv.rows() % n != 0 {
            return shape_err("edge_logits", uv, vv);
        }
        let rows = uv.rows();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let base = (r / n) * n;
            let ui = uv.data()[r];
            let dst = &mut out[r * n..(r + 1) * n];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = ui + vv.data()[base + j];
            }
        }
        let ng = self.ng(u) || self.ng(v);
        Ok(self.push(mat(rows, n, out), Op::EdgeLogits(u, v, n), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= av.rows() {
                return Err(Error::Shape(format!(
                    "gather row {i} out of {}",
                    av.rows()
                )));
            }
            out.extend_from_slice(av.row(i));
        }
        let out = mat(idx.len(), n, out);
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, idx), ng))
    }

    /// Gather flat element indices into a `[rows, cols]` result.
    pub fn gather_flat(&mut self, a: Var, idx: Arc<Vec<usize>>, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if rows * cols != idx.len() {
            return Err(Error::Shape("gather_flat output shape".into()));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            match av.data().get(i) {
                Some(&x) => out.push(x),
                None => return Err(Error::Shape(format!("gather index {i} out of range"))),
            }
        }
        let ng = self.ng(a);
        Ok(self.push(mat(rows, cols, out), Op::GatherFlat(a, idx), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return shape_err("concat_rows", self.value(parts[0]), pv);
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(rows, cols, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            if pv.rows() != rows {
                return shape_err("concat_cols", self.value(parts[0]), pv);
            }
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(rows, total, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}+{len} of {}",
                av.cols()
            )));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = mat(av.rows(), len, out);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if rows * cols != av.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} to [{rows},{cols}]",
                av.shape()
            )));
        }
        let out = mat(rows, cols, av.data().to_vec());
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Adjoints of every node with respect to the scalar `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let seed = Tensor::full(&[1, 1], 1.0);
        self.backward_from(out, seed)
    }

    /// Adjoints with an explicit upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Grads {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        let (r, c) = self.shape(out);
        grads[out.0] = Some(seed.into_matrix().reshape(&[r, c]).expect("seed shape"));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, *a, mat(m, k, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, mat(k, n, db));
                }
            }
            Op::BlockMatMul(a, b, blocks) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let p_n = *blocks;
                let (m, k, n) = (av.rows() / p_n, av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; p_n * m * k];
                    for p in 0..p_n {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[p * m * n..(p + 1) * m * n],
                            false,
                            &bv.data()[p * k * n..(p + 1) * k * n],
                            true,
                            &mut da[p * m * k..(p + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, mat(p_n * m, k, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; p_n * k * n];
                    for p in 0..p_n {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[p * m * k..(p + 1) * m * k],
                            true,
                            &g.data()[p * m * n..(p + 1) * m * n],
                            false,
                            &mut db[p * k * n..(p + 1) * k * n],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, mat(p_n * k, n, db));
                }
            }
            Op::BlockMatMulBT(a, b, blocks) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let p_n = *blocks;
                let (m, k, n) = (av.rows() / p_n, av.cols(), bv.rows() / p_n);
                if self.ng(*a) {
                    // da_p = g_p · b_p
                    let mut da = vec![0.0; p_n * m * k];
                    for p in 0..p_n {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[p * m * n..(p + 1) * m * n],
                            false,
                            &bv.data()[p * n * k..(p + 1) * n * k],
                            false,
                            &mut da[p * m * k..(p + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, mat(p_n * m, k, da));
                }
                if self.ng(*b) {
                    // db_p = g_pᵀ · a_p
                    let mut db = vec![0.0; p_n * n * k];
                    for p in 0..p_n {
                        gemm(
                            n,
                            m,
                            k,
                            &g.data()[p * m * n..(p + 1) * m * n],
                            true,
                            &av.data()[p * m * k..(p + 1) * m * k],
                            false,
                            &mut db[p * n * k..(p + 1) * n * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, mat(p_n * n, k, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y).unwrap());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y).unwrap());
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *b, mat(1, n, db));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = g.cols();
                if self.ng(*a) {
                    let mut da = g.data().to_vec();
                    for row in da.chunks_mut(n) {
                        for (x, y) in row.iter_mut().zip(bv.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, mat(g.rows(), n, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; n];
                    for (grow, arow) in g.data().chunks(n).zip(av.data().chunks(n)) {
                        for ((d, x), y) in db.iter_mut().zip(grow).zip(arow) {
                            *d += x * y;
                        }
                    }
                    self.accumulate(grads, *b, mat(1, n, db));
                }
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let n = g.cols().max(1);
                if self.ng(*a) {
                    let mut da = g.data().to_vec();
                    for (row, &k) in da.chunks_mut(n).zip(sv.data()) {
                        row.iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(grads, *a, mat(g.rows(), g.cols(), da));
                }
                if self.ng(*s) {
                    let ds: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(av.data().chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *s, mat(sv.rows(), 1, ds));
                }
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*s) {
                    self.accumulate(grads, *s, Tensor::scalar(g.sum()));
                }
            }
            Op::MulScalar(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let k = sv.item();
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * k));
                }
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                let da = mat(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |x, e| x * e).unwrap()),
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = g.zip_map(av, |x, v| if v > 0.0 { x } else { 0.0 }).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let s = *slope;
                let da = g.zip_map(av, |x, v| if v > 0.0 { x } else { s * x }).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                let da = g.zip_map(av, |x, v| x * sigmoid(v)).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |x, v| 2.0 * x * v).unwrap());
            }
            Op::SafeRecip(a, floor) => {
                let av = self.value(*a);
                let f = *floor;
                let da = g
                    .zip_map(av, |x, v| if v.abs() < f { 0.0 } else { -x / (v * v) })
                    .unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(&[r, c], g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Vec::with_capacity(r * c);
                for &x in g.data() {
                    da.extend(std::iter::repeat_n(x, c));
                }
                self.accumulate(grads, *a, mat(r, c, da));
            }
            Op::MeanGroups(a, group) => {
                let (r, c) = self.shape(*a);
                let inv = 1.0 / *group as f64;
                let mut da = Vec::with_capacity(r * c);
                for row in 0..r {
                    da.extend(g.row(row / group).iter().map(|x| x * inv));
                }
                self.accumulate(grads, *a, mat(r, c, da));
            }
            Op::ReduceGroups(a, arg) => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                for (x, &i) in g.data().iter().zip(arg) {
                    da[i] += x;
                }
                self.accumulate(grads, *a, mat(r, c, da));
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let n = av.cols().max(1);
                let mut da = Vec::with_capacity(av.len());
                for ((row, &nrm), &gx) in av.data().chunks(n).zip(y.data()).zip(g.data()) {
                    if nrm > 0.0 {
                        da.extend(row.iter().map(|x| gx * x / nrm));
                    } else {
                        da.extend(std::iter::repeat_n(0.0, row.len()));
                    }
                }
                self.accumulate(grads, *a, mat(av.rows(), av.cols(), da));
            }
            Op::LayerNorm(a, inv_std) => {
                let n = y.cols();
                let nf = n as f64;
                let mut da = Vec::with_capacity(y.len());
                for ((yr, gr), &is) in y.data().chunks(n).zip(g.data().chunks(n)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    da.extend(gr.iter().zip(yr).map(|(gx, yx)| is * (gx - mg - yx * mgy)));
                }
                self.accumulate(grads, *a, mat(y.rows(), n, da));
            }
            Op::Softmax(a) => {
                let n = y.cols();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n.max(1)).zip(g.data().chunks(n.max(1))) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    da.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, mat(y.rows(), n, da));
            }
            Op::LogSoftmax(a) => {
                let n = y.cols();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n.max(1)).zip(g.data().chunks(n.max(1))) {
                    let sg: f64 = gr.iter().sum();
                    da.extend(yr.iter().zip(gr).map(|(ly, q)| q - ly.exp() * sg));
                }
                self.accumulate(grads, *a, mat(y.rows(), n, da));
            }
            Op::EdgeLogits(u, v, n) => {
                let n = *n;
                let rows = g.rows();
                if self.ng(*u) {
                    let du: Vec<f64> = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, *u, mat(rows, 1, du));
                }
                if self.ng(*v) {
                    let mut dv = vec![0.0; rows];
                    for r in 0..rows {
                        let base = (r / n) * n;
                        for (j, x) in g.row(r).iter().enumerate() {
                            dv[base + j] += x;
                        }
                    }
                    self.accumulate(grads, *v, mat(rows, 1, dv));
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    let src = g.row(k);
                    for (d, x) in da[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, mat(r, c, da));
            }
            Op::GatherFlat(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                for (&i, x) in idx.iter().zip(g.data()) {
                    da[i] += x;
                }
                self.accumulate(grads, *a, mat(r, c, da));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let slice = g.data()[off * c..(off + r) * c].to_vec();
                        self.accumulate(grads, p, mat(r, c, slice));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.shape(p);
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for row in 0..r {
                            dp.extend_from_slice(&g.data()[row * total + off..row * total + off + w]);
                        }
                        self.accumulate(grads, p, mat(r, w, dp));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                if !self.ng(*a) {
                    return;
                }
                let (r, c) = self.shape(*a);
                let w = g.cols();
                // Add straight into the parent's adjoint; several slices of
                // one wide matrix would otherwise each allocate a full copy.
                let da = grads[a.0].get_or_insert_with(|| Tensor::zeros(&[r, c]));
                let data = da.data_mut();
                for row in 0..r {
                    for (x, gv) in data[row * c + start..row * c + start + w].iter_mut().zip(g.row(row)) {
                        *x += gv;
                    }
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, mat(r, c, g.data().to_vec()));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row softmax with optional support mask; empty-support rows are all zero.
pub(crate) fn softmax_masked(x: &Tensor, mask: Option<&RowMask>) -> Tensor {
    let n = x.cols();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let allowed = |j: usize| mask.is_none_or(|m| m.allowed(r, j));
        let mx = (0..n)
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let dst = &mut out[r * n..(r + 1) * n];
        let mut z = 0.0;
        for j in 0..n {
            if allowed(j) {
                let e = (row[j] - mx).exp();
                dst[j] = e;
                z += e;
            }
        }
        dst.iter_mut().for_each(|v| *v /= z);
    }
    mat(x.rows(), n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(&[x0.rows(), x0.cols()]));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.leaf(xp);
                let o = build(&mut t, v);
                t.value(o).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "entry {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::Rng::new(seed);
        Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn matmul_and_blocks() {
        let w = sample(3, 2, 1);
        fd_check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv).unwrap();
                let y = t.square(y);
                t.sum_all(y)
            },
            sample(4, 3, 2),
        );
        let b = sample(4, 2, 3);
        fd_check(
            move |t, x| {
                let bv = t.leaf(b.clone());
                let y = t.block_matmul(x, bv, 2).unwrap();
                let z = t.block_matmul_bt(y, x, 2).unwrap();
                let z = t.square(z);
                t.sum_all(z)
            },
            sample(4, 2, 4),
        );
    }

    #[test]
    fn softmax_family() {
        let mask = RowMask::from_fn(3, 3, |i, j| i != j || i == 0);
        fd_check(
            move |t, x| {
                let s = t.softmax_rows(x, Some(&mask)).unwrap();
                let w = t.constant(sample(3, 3, 9));
                let p = t.mul(s, w).unwrap();
                t.sum_all(p)
            },
            sample(3, 3, 5),
        );
        fd_check(
            |t, x| {
                let l = t.log_softmax_rows(x);
                let l = t.square(l);
                t.sum_all(l)
            },
            sample(2, 4, 6),
        );
    }

    #[test]
    fn norms_and_reductions() {
        fd_check(
            |t, x| {
                let n = t.layer_norm(x, 1e-5);
                let w = t.constant(sample(3, 4, 11));
                let p = t.mul(n, w).unwrap();
                let r = t.row_norm(p);
                let inv = t.safe_recip(r, 1e-12);
                let q = t.mul_col(p, inv).unwrap();
                let m = t.mean_groups(q, 3).unwrap();
                let mx = t.reduce_groups(x, 3, GroupReduce::Max).unwrap();
                let s = t.add(m, mx).unwrap();
                let s = t.softplus(s);
                t.sum_all(s)
            },
            sample(3, 4, 7),
        );
    }

    #[test]
    fn structural_ops() {
        fd_check(
            |t, x| {
                let u = t.slice_cols(x, 0, 1).unwrap();
                let v = t.slice_cols(x, 1, 1).unwrap();
                let e = t.edge_logits(u, v, 2).unwrap();
                let e = t.leaky_relu(e, 0.2);
                let g = t.gather_rows(x, Arc::new(vec![3, 0, 0])).unwrap();
                let f = t.gather_flat(x, Arc::new(vec![1, 2, 5, 7]), 2, 2).unwrap();
                let c = t.concat_rows(&[e, f]).unwrap();
                let c = t.transpose(c);
                let c = t.reshape(c, 6, 2).unwrap();
                let d = t.concat_cols(&[c, c]).unwrap();
                let d = t.exp(d);
                let gs = t.sum_all(g);
                let ds = t.sum_all(d);
                let tot = t.mul_scalar(ds, gs).unwrap();
                t.add_scalar(tot, gs).unwrap()
            },
            sample(4, 2, 8),
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn empty_support_rows_are_zero() {
        let mask = RowMask::from_fn(2, 2, |i, _| i == 0);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = t.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(t.value(s).row(1), &[0.0, 0.0]);
        let sum: f64 = t.value(s).row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }
}
