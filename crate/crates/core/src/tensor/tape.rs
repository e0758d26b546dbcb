use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, PoolConfig, PoolGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn graph_id(self) -> u64 {
        self.graph
    }

    pub fn index(self) -> usize {
        self.index
    }
}

/// The recorded operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNT,
    Add,
    AddBias,
    Scale,
    Softmax,
    LayerNorm,
    Gelu,
    Conv3dPool,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    MeanRows,
    Sum,
    Embedding,
    Reshape,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulNT,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Conv3dPool,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::Embedding,
        OpKind::Reshape,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Conv3dPool => "conv3d_pool",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::MeanRows => "mean",
            OpKind::Sum => "sum",
            OpKind::Embedding => "embedding",
            OpKind::Reshape => "reshape",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Conv3dPool {
        x: usize,
        w: usize,
        geo: PoolGeometry,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    MeanRows(usize),
    Sum(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Conv3dPool { .. } => OpKind::Conv3dPool,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Reshape(..) => OpKind::Reshape,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of recorded operations.
///
/// Node indices are assigned in recording order, so every input precedes its
/// outputs and a single reverse sweep visits each node once.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test fixture: corrupts the backward rule of one op kind by scaling the
    /// gradient it propagates.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {v:?} does not belong to graph {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::matmul_nt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMulNT(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let out = ops::add_bias(&self.nodes[ix].value, &self.nodes[ib].value)?;
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(out, Op::AddBias(ix, ib), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::scale(&self.nodes[ix].value, s);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Scale(ix, s), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::softmax_rows(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Softmax(ix), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let ln = ops::layer_norm(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        )?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(
            ln.out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                mean: ln.mean,
                rstd: ln.rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::gelu(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Gelu(ix), rg))
    }

    pub fn conv3d_pool(&mut self, x: Var, w: Var, cfg: PoolConfig) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let geo = PoolGeometry::new(&self.nodes[ix].value, &self.nodes[iw].value, cfg)?;
        let out = ops::conv3d_pool(&self.nodes[ix].value, &self.nodes[iw].value, cfg)?;
        let rg = self.rg(ix) || self.rg(iw);
        Ok(self.push(out, Op::Conv3dPool { x: ix, w: iw, geo }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        if idx.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat_rows(&values)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatRows(idx), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::slice_rows(&self.nodes[ix].value, start, len)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SliceRows { x: ix, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        if idx.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat_cols(&values)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatCols(idx), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::slice_cols(&self.nodes[ix].value, start, len)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SliceCols { x: ix, start }, rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::mean_rows(&self.nodes[ix].value)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::MeanRows(ix), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = ops::sum(&self.nodes[ix].value);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Sum(ix), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let out = ops::embedding(&self.nodes[it].value, ids)?;
        let rg = self.rg(it);
        Ok(self.push(
            out,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        if self.nodes[ix].value.shape() == shape {
            return Ok(x);
        }
        let out = self.nodes[ix].value.reshape(shape)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Reshape(ix), rg))
    }

    /// Scalar softmax cross-entropy of a (1, C) logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let il = self.check(logits)?;
        let (loss, probs) = ops::cross_entropy(&self.nodes[il].value, label)?;
        let rg = self.rg(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut acc: Vec<Option<Vec<T>>> = Vec::new();
        acc.resize_with(il + 1, || None);
        acc[il] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(self.nodes.len(), || None);

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = acc[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            let Some(mut g) = acc[i].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                let s = T::lit(1.5);
                g.iter_mut().for_each(|v| *v = *v * s);
            }
            self.backward_node(i, &g, &mut acc);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: leaf_grads,
        })
    }

    fn slot<'a>(&self, acc: &'a mut [Option<Vec<T>>], i: usize) -> Option<&'a mut Vec<T>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.numel();
        Some(acc[i].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, i: usize, g: &[T], acc: &mut [Option<Vec<T>>]) {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).rows_cols();
                let n = val(b).shape()[1];
                if let Some(da) = self.slot(acc, a) {
                    // dA += dC · Bᵀ
                    T::gemm(m, n, k, g, n as isize, 1, val(b).data(), 1, n as isize, T::one(), da);
                }
                if let Some(db) = self.slot(acc, b) {
                    // dB += Aᵀ · dC
                    T::gemm(k, m, n, val(a).data(), 1, k as isize, g, n as isize, 1, T::one(), db);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = val(a).rows_cols();
                let n = val(b).shape()[0];
                if let Some(da) = self.slot(acc, a) {
                    // dA += dC · B
                    T::gemm(m, n, k, g, n as isize, 1, val(b).data(), k as isize, 1, T::one(), da);
                }
                if let Some(db) = self.slot(acc, b) {
                    // dB += dCᵀ · A
                    T::gemm(n, m, k, g, 1, n as isize, val(a).data(), k as isize, 1, T::one(), db);
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if let Some(d) = self.slot(acc, j) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(acc, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
                if let Some(db) = self.slot(acc, b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(dx) = self.slot(acc, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * s);
                }
            }
            &Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let (_, n) = self.nodes[i].value.rows_cols();
                if let Some(dx) = self.slot(acc, x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (_, d) = val(x).rows_cols();
                let xd = val(x).data();
                let gm = val(gamma).data();
                let inv_d = T::one() / T::from_usize(d).unwrap_or_else(T::one);
                if let Some(dg) = self.slot(acc, gamma) {
                    for (r, (xrow, grow)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * (xrow[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if let Some(db) = self.slot(acc, beta) {
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                    }
                }
                if let Some(dx) = self.slot(acc, x) {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((xrow, grow), drow)) in
                        xd.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gm[j];
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat;
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            drow[j] = drow[j] + rstd[r] * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(dx) = self.slot(acc, x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(x).data()) {
                        *d = *d + gv * ops::gelu_grad_scalar(xv);
                    }
                }
            }
            &Op::Conv3dPool { x, w, geo } => {
                let c = geo.channels;
                if let Some(dx) = self.slot(acc, x) {
                    let wd = val(w).data();
                    geo.for_each_tap(|o, xi, k| {
                        for ((d, &gv), &wv) in
                            dx[xi..xi + c].iter_mut().zip(&g[o..o + c]).zip(&wd[k..k + c])
                        {
                            *d = *d + gv * wv;
                        }
                    });
                }
                if let Some(dw) = self.slot(acc, w) {
                    let xd = val(x).data();
                    geo.for_each_tap(|o, xi, k| {
                        for ((d, &gv), &xv) in
                            dw[k..k + c].iter_mut().zip(&g[o..o + c]).zip(&xd[xi..xi + c])
                        {
                            *d = *d + gv * xv;
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if let Some(dp) = self.slot(acc, p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &g)| *d = *d + g);
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let inner: usize = val(x).shape()[1..].iter().product();
                if let Some(dx) = self.slot(acc, x) {
                    let base = start * inner;
                    dx[base..base + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if let Some(dp) = self.slot(acc, p) {
                        for (r, drow) in dp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + col..r * total + col + w];
                            drow.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    col += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let total = val(x).shape()[1];
                let w = self.nodes[i].value.shape()[1];
                if let Some(dx) = self.slot(acc, x) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        let dst = &mut dx[r * total + start..r * total + start + w];
                        dst.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = val(x).rows_cols();
                let inv = T::one() / T::from_usize(m).unwrap_or_else(T::one);
                if let Some(dx) = self.slot(acc, x) {
                    for drow in dx.chunks_mut(n) {
                        drow.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * inv);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(acc, x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).shape()[1];
                if let Some(dt) = self.slot(acc, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.slot(acc, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(dl) = self.slot(acc, *logits) {
                    for (j, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - target);
                    }
                }
            }
        }
    }
}

/// Gradients of every `requires_grad` leaf, produced by [`Graph::backward`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf that requires grad; `None` for constants,
    /// intermediate nodes and variables from other graphs.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}
