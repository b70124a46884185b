use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::{ParamId, ParamSet, Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clip {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    Pool1d {
        x: Var,
        kind: PoolKind,
        k: usize,
        stride: usize,
        padding: usize,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    IndexRows {
        x: Var,
        idx: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterSum {
        src: Var,
        index: Vec<usize>,
    },
    ScatterMax {
        src: Var,
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        scores: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass and runs the reverse sweep.
///
/// Nodes are appended in evaluation order, so the tape order is already a
/// topological order and backward visits each node exactly once.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &Shape, b: &Shape) -> Error {
    Error::Dimension {
        op,
        lhs: a.clone(),
        rhs: b.clone(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
        }
    }

    /// A graph in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_shaped(&mut self, shape: Shape, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), data.len());
        self.push(Tensor { shape, data }, op, needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (see [`Graph::backward_full`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a copy of parameter `id` on the tape.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    // ---- binary elementwise ------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_shaped(shape, data, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("min", a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Adds `bias[j]` to every element whose index along `axis` is `j`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        if axis >= shape.rank() {
            return Err(Error::Axis {
                op: "add_bias",
                axis,
                rank: shape.rank(),
            });
        }
        let (outer, n, inner) = shape.split_at_axis(axis);
        if self.dims(bias) != [n] {
            return Err(dim_err("add_bias", &shape, self.shape(bias)));
        }
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut out = Vec::with_capacity(xd.len());
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                out.extend(xd[base..base + inner].iter().map(|&v| v + bd[j]));
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push_shaped(shape, out, Op::AddBias { x, bias, axis }, ng))
    }

    /// Multiplies every slice `x[i, ...]` by the scalar `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).clone();
        if shape.rank() == 0 || self.dims(s) != [shape.0[0]] {
            return Err(dim_err("scale_rows", &shape, self.shape(s)));
        }
        let rows = shape.0[0];
        let inner = shape.numel() / rows.max(1);
        let xd = self.data(x);
        let sd = self.data(s);
        let mut out = Vec::with_capacity(xd.len());
        for i in 0..rows {
            out.extend(xd[i * inner..(i + 1) * inner].iter().map(|&v| v * sd[i]));
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push_shaped(shape, out, Op::ScaleRows { x, s }, ng))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_shaped(Shape(vec![m, n]), out, Op::MatMul(a, b), ng))
    }

    // ---- unary -------------------------------------------------------------

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).clone();
        let ng = self.ng(x);
        self.push_shaped(shape, data, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), Op::Log(x))
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.max(lo).min(hi), Op::Clip { x, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.last_axis_rows("softmax", x)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            softmax_row(&xd[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.shape(x).clone();
        let ng = self.ng(x);
        Ok(self.push_shaped(shape, out, Op::Softmax(x), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.last_axis_rows("log_softmax", x)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shape(x).clone();
        let ng = self.ng(x);
        Ok(self.push_shaped(shape, out, Op::LogSoftmax(x), ng))
    }

    fn last_axis_rows(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        if shape.rank() == 0 {
            return Err(Error::Axis { op, axis: 0, rank: 0 });
        }
        let n = *shape.0.last().unwrap();
        Ok((shape.numel() / n.max(1), n))
    }

    /// Inverted dropout: kept activations are divided by `1 - p`. Identity
    /// in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.training || p == 0.0 {
            let mask = vec![1.0; self.value(x).len()];
            return Ok(self.map(x, |v| v, Op::Dropout { x, mask }));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).clone();
        let ng = self.ng(x);
        Ok(self.push_shaped(shape, data, Op::Dropout { x, mask }, ng))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), ng)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize, Shape)> {
        let shape = self.shape(x);
        if axis >= shape.rank() {
            return Err(Error::Axis {
                op,
                axis,
                rank: shape.rank(),
            });
        }
        let (o, n, i) = shape.split_at_axis(axis);
        let mut reduced = shape.0.clone();
        reduced.remove(axis);
        Ok((o, n, i, Shape(reduced)))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.check_axis("sum_axis", x, axis)?;
        let out = reduce_axis(self.data(x), outer, n, inner, 1.0);
        let ng = self.ng(x);
        Ok(self.push_shaped(shape, out, Op::SumAxis { x, axis }, ng))
    }

    /// Mean over `axis` (the "mean-pool" reduction).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.check_axis("mean_axis", x, axis)?;
        let out = reduce_axis(self.data(x), outer, n, inner, 1.0 / n.max(1) as f64);
        let ng = self.ng(x);
        Ok(self.push_shaped(shape, out, Op::MeanAxis { x, axis }, ng))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.check_axis("max_axis", x, axis)?;
        if n == 0 {
            return Err(Error::Contract("max over an empty axis".into()));
        }
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let src = (o * n + j) * inner + i;
                    let dst = o * inner + i;
                    if xd[src] > out[dst] {
                        out[dst] = xd[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push_shaped(shape, out, Op::MaxAxis { x, argmax }, ng))
    }

    // ---- convolution and pooling ------------------------------------------

    /// 1-D convolution. `x: [batch, c_in, len]`, `w: [c_out, c_in, k]`.
    /// Output length is `(len + 2*padding - dilation*(k-1) - 1) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, padding: usize) -> Result<Var> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        if xd.len() != 3 || wd.len() != 3 || xd[1] != wd[1] || stride == 0 || dilation == 0 {
            return Err(dim_err("conv1d", self.shape(x), self.shape(w)));
        }
        let (b, cin, len) = (xd[0], xd[1], xd[2]);
        let (cout, k) = (wd[0], wd[2]);
        let span = dilation * (k - 1) + 1;
        if len + 2 * padding < span {
            return Err(dim_err("conv1d", self.shape(x), self.shape(w)));
        }
        let lout = (len + 2 * padding - span) / stride + 1;
        let xv = self.data(x);
        let wv = self.data(w);
        let mut out = vec![0.0; b * cout * lout];
        for bi in 0..b {
            for co in 0..cout {
                let orow = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                for ci in 0..cin {
                    let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    let wrow = &wv[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (kk, &wk) in wrow.iter().enumerate() {
                        let offset = (kk * dilation) as isize - padding as isize;
                        for (t, o) in orow.iter_mut().enumerate() {
                            let pos = (t * stride) as isize + offset;
                            if pos >= 0 && (pos as usize) < len {
                                *o += wk * xrow[pos as usize];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push_shaped(
            Shape(vec![b, cout, lout]),
            out,
            Op::Conv1d {
                x,
                w,
                stride,
                dilation,
                padding,
            },
            ng,
        ))
    }

    /// Sliding-window pooling over the last axis of `[batch, channels, len]`.
    /// Padded positions are ignored: max skips them, mean divides by the
    /// number of in-range elements.
    pub fn pool1d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let xd = self.dims(x);
        if xd.len() != 3 || k == 0 || stride == 0 || xd[2] + 2 * padding < k || padding >= k {
            return Err(dim_err("pool1d", self.shape(x), &Shape(vec![k])));
        }
        let (b, c, len) = (xd[0], xd[1], xd[2]);
        let lout = (len + 2 * padding - k) / stride + 1;
        let xv = self.data(x);
        let mut out = vec![0.0; b * c * lout];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0usize; out.len()];
        }
        for row in 0..b * c {
            let xrow = &xv[row * len..(row + 1) * len];
            for t in 0..lout {
                let start = (t * stride) as isize - padding as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + k as isize) as usize).min(len);
                let o = row * lout + t;
                match kind {
                    PoolKind::Max => {
                        let mut best = lo;
                        for p in lo..hi {
                            if xrow[p] > xrow[best] {
                                best = p;
                            }
                        }
                        out[o] = xrow[best];
                        argmax[o] = row * len + best;
                    }
                    PoolKind::Mean => {
                        let s: f64 = xrow[lo..hi].iter().sum();
                        out[o] = s / (hi - lo) as f64;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push_shaped(
            Shape(vec![b, c, lout]),
            out,
            Op::Pool1d {
                x,
                kind,
                k,
                stride,
                padding,
                argmax,
            },
            ng,
        ))
    }

    // ---- indexing ----------------------------------------------------------

    /// Row lookup: `x: [n, d]`, returns `[idx.len(), d]`. Serves as the
    /// embedding lookup.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xd = self.dims(x);
        if xd.len() != 2 {
            return Err(Error::Axis {
                op: "index_rows",
                axis: 0,
                rank: xd.len(),
            });
        }
        let (n, d) = (xd[0], xd[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("row index {bad} out of range for {n} rows")));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push_shaped(
            Shape(vec![idx.len(), d]),
            out,
            Op::IndexRows { x, idx: idx.to_vec() },
            ng,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.index_rows(table, ids)
    }

    /// Picks `x[i, idx[i]]` from `x: [n, m]`, returning `[n]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xd = self.dims(x);
        if xd.len() != 2 || xd[0] != idx.len() {
            return Err(dim_err("gather", self.shape(x), &Shape(vec![idx.len()])));
        }
        let m = xd[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for width {m}"
            )));
        }
        let xv = self.data(x);
        let out = idx.iter().enumerate().map(|(r, &c)| xv[r * m + c]).collect();
        let ng = self.ng(x);
        Ok(self.push_shaped(Shape(vec![idx.len()]), out, Op::Gather { x, idx: idx.to_vec() }, ng))
    }

    fn check_segments(&self, op: &'static str, src: Var, index: &[usize], n: usize) -> Result<(usize, usize)> {
        let sd = self.dims(src);
        if sd.is_empty() || sd[0] != index.len() {
            return Err(dim_err(op, self.shape(src), &Shape(vec![index.len()])));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "segment index {bad} out of range for {n} segments"
            )));
        }
        let e = sd[0];
        Ok((e, self.value(src).len() / e.max(1)))
    }

    /// `out[index[e]] += src[e]` with `src: [e, d]`, returning `[n, d]`.
    pub fn scatter_sum(&mut self, src: Var, index: &[usize], n: usize) -> Result<Var> {
        let (_, d) = self.check_segments("scatter_sum", src, index, n)?;
        let sv = self.data(src);
        let mut out = vec![0.0; n * d];
        for (e, &t) in index.iter().enumerate() {
            for j in 0..d {
                out[t * d + j] += sv[e * d + j];
            }
        }
        let mut shape = self.dims(src).to_vec();
        shape[0] = n;
        let ng = self.ng(src);
        Ok(self.push_shaped(
            Shape(shape),
            out,
            Op::ScatterSum {
                src,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Segment-wise maximum; empty segments yield 0.
    pub fn scatter_max(&mut self, src: Var, index: &[usize], n: usize) -> Result<Var> {
        let (_, d) = self.check_segments("scatter_max", src, index, n)?;
        let sv = self.data(src);
        let mut out = vec![f64::NEG_INFINITY; n * d];
        let mut argmax = vec![usize::MAX; n * d];
        for (e, &t) in index.iter().enumerate() {
            for j in 0..d {
                let v = sv[e * d + j];
                if v > out[t * d + j] {
                    out[t * d + j] = v;
                    argmax[t * d + j] = e * d + j;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&argmax) {
            if *a == usize::MAX {
                *o = 0.0;
            }
        }
        let mut shape = self.dims(src).to_vec();
        shape[0] = n;
        let ng = self.ng(src);
        Ok(self.push_shaped(Shape(shape), out, Op::ScatterMax { src, argmax }, ng))
    }

    /// Softmax of `scores: [e]` within each segment given by `index`.
    pub fn segment_softmax(&mut self, scores: Var, index: &[usize], n: usize) -> Result<Var> {
        if self.shape(scores).rank() != 1 {
            return Err(Error::Axis {
                op: "segment_softmax",
                axis: 0,
                rank: self.shape(scores).rank(),
            });
        }
        self.check_segments("segment_softmax", scores, index, n)?;
        let sv = self.data(scores);
        let mut max = vec![f64::NEG_INFINITY; n];
        for (e, &t) in index.iter().enumerate() {
            max[t] = max[t].max(sv[e]);
        }
        let mut out: Vec<f64> = index.iter().enumerate().map(|(e, &t)| (sv[e] - max[t]).exp()).collect();
        let mut denom = vec![0.0; n];
        for (e, &t) in index.iter().enumerate() {
            denom[t] += out[e];
        }
        for (e, &t) in index.iter().enumerate() {
            out[e] /= denom[t];
        }
        let shape = self.shape(scores).clone();
        let ng = self.ng(scores);
        Ok(self.push_shaped(
            shape,
            out,
            Op::SegmentSoftmax {
                scores,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).clone();
        if axis >= base.rank() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.rank(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.rank() == base.rank()
                && s.0
                    .iter()
                    .zip(&base.0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            total += s.0[axis];
        }
        let (outer, _, inner) = base.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.dims(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.0.clone();
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push_shaped(
            Shape(shape),
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        if axis >= shape.rank() {
            return Err(Error::Axis {
                op: "narrow",
                axis,
                rank: shape.rank(),
            });
        }
        let (outer, n, inner) = shape.split_at_axis(axis);
        if start + len > n {
            return Err(dim_err("narrow", &shape, &Shape(vec![start, len])));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut dims = shape.0.clone();
        dims[axis] = len;
        let ng = self.ng(x);
        Ok(self.push_shaped(Shape(dims), out, Op::Narrow { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push_shaped(shape, data, Op::Reshape(x), ng))
    }

    // ---- backward ----------------------------------------------------------

    /// Hash of every discrete branch taken on the tape: relu activity,
    /// argmax winners, `min` picks and clip regions. Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(_) => node.value.data.iter().for_each(|&v| feed((v > 0.0) as u64)),
                Op::MaxAxis { argmax, .. } | Op::Pool1d { argmax, .. } | Op::ScatterMax { argmax, .. } => {
                    argmax.iter().for_each(|&a| feed(a as u64))
                }
                Op::Min(a, b) => {
                    let (a, b) = (self.data(*a), self.data(*b));
                    a.iter().zip(b).for_each(|(x, y)| feed((x <= y) as u64));
                }
                Op::Clip { x, lo, hi } => self.data(*x).iter().for_each(|&v| {
                    feed(if v < *lo {
                        0
                    } else if v > *hi {
                        2
                    } else {
                        1
                    })
                }),
                _ => continue,
            }
            feed(i as u64);
        }
        h
    }

    /// Gradient of the scalar `loss` with respect to every recorded node.
    /// Entries are `None` for nodes that do not need a gradient or are not
    /// reachable from `loss`.
    pub fn backward_full(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Runs the reverse sweep and accumulates parameter gradients into
    /// `params`. Repeated calls add up until [`ParamSet::zero_grad`].
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward_full(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = params.get_mut(*id);
                if p.grad.len() != g.len() {
                    return Err(dim_err("backward", p.grad.shape(), node.value.shape()));
                }
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, || g.iter().zip(bd).map(|(g, y)| g * y).collect());
                self.acc(grads, *b, || g.iter().zip(ad).map(|(g, x)| g * x).collect());
            }
            Op::Min(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, || {
                    g.iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                        .collect()
                });
                self.acc(grads, *b, || {
                    g.iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (x, y))| if x <= y { 0.0 } else { *g })
                        .collect()
                });
            }
            Op::AddBias { x, bias, axis } => {
                self.acc(grads, *x, || g.to_vec());
                self.acc(grads, *bias, || {
                    let (outer, n, inner) = node.value.shape().split_at_axis(*axis);
                    let mut gb = vec![0.0; n];
                    for o in 0..outer {
                        for (j, gbj) in gb.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *gbj += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    gb
                });
            }
            Op::ScaleRows { x, s } => {
                let rows = self.dims(*x)[0];
                let inner = g.len() / rows.max(1);
                let (xd, sd) = (self.data(*x), self.data(*s));
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; g.len()];
                    for i in 0..rows {
                        for j in 0..inner {
                            gx[i * inner + j] = g[i * inner + j] * sd[i];
                        }
                    }
                    gx
                });
                self.acc(grads, *s, || {
                    (0..rows)
                        .map(|i| (0..inner).map(|j| g[i * inner + j] * xd[i * inner + j]).sum())
                        .collect()
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                // dA = G B^T, dB = A^T G
                self.acc(grads, *a, || {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    ga
                });
                self.acc(grads, *b, || {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                    gb
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, || g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, || g.to_vec()),
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, || {
                    g.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()
                });
            }
            Op::Tanh(x) => self.acc(grads, *x, || {
                g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, || {
                g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()
            }),
            Op::Exp(x) => self.acc(grads, *x, || g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, || g.iter().zip(xd).map(|(g, v)| g / v).collect());
            }
            Op::Clip { x, lo, hi } => {
                let xd = self.data(*x);
                self.acc(grads, *x, || {
                    g.iter()
                        .zip(xd)
                        .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                        .collect()
                });
            }
            Op::Softmax(x) => {
                let n = *node.value.dims().last().unwrap();
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..g.len() / n.max(1) {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = g[s.clone()].iter().zip(&out[s.clone()]).map(|(a, b)| a * b).sum();
                        for i in s {
                            gx[i] = out[i] * (g[i] - dot);
                        }
                    }
                    gx
                });
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.dims().last().unwrap();
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..g.len() / n.max(1) {
                        let s = r * n..(r + 1) * n;
                        let total: f64 = g[s.clone()].iter().sum();
                        for i in s {
                            gx[i] = g[i] - out[i].exp() * total;
                        }
                    }
                    gx
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, || vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, || vec![g[0] / n.max(1) as f64; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = self.shape(*x).split_at_axis(*axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / n.max(1) as f64
                } else {
                    1.0
                };
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    gx
                });
            }
            Op::MaxAxis { x, argmax, .. }
            | Op::Pool1d {
                x,
                kind: PoolKind::Max,
                argmax,
                ..
            } => {
                let n = self.value(*x).len();
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; n];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                    gx
                });
            }
            Op::Pool1d {
                x,
                kind: PoolKind::Mean,
                k,
                stride,
                padding,
                ..
            } => {
                let len = self.dims(*x)[2];
                let lout = node.value.dims()[2];
                let rows = g.len() / lout.max(1);
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; rows * len];
                    for row in 0..rows {
                        for t in 0..lout {
                            let start = (t * stride) as isize - *padding as isize;
                            let lo = start.max(0) as usize;
                            let hi = ((start + *k as isize) as usize).min(len);
                            let share = g[row * lout + t] / (hi - lo) as f64;
                            for p in lo..hi {
                                gx[row * len + p] += share;
                            }
                        }
                    }
                    gx
                });
            }
            Op::Conv1d {
                x,
                w,
                stride,
                dilation,
                padding,
            } => {
                let (b, cin, len) = (self.dims(*x)[0], self.dims(*x)[1], self.dims(*x)[2]);
                let (cout, k) = (self.dims(*w)[0], self.dims(*w)[2]);
                let lout = node.value.dims()[2];
                let (xv, wv) = (self.data(*x), self.data(*w));
                let tap = |t: usize, kk: usize| -> Option<usize> {
                    let pos = (t * stride) as isize + (kk * dilation) as isize - *padding as isize;
                    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
                };
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; xv.len()];
                    for bi in 0..b {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let base = (bi * cin + ci) * len;
                                for kk in 0..k {
                                    let wk = wv[(co * cin + ci) * k + kk];
                                    for (t, gv) in grow.iter().enumerate() {
                                        if let Some(p) = tap(t, kk) {
                                            gx[base + p] += wk * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    gx
                });
                self.acc(grads, *w, || {
                    let mut gw = vec![0.0; wv.len()];
                    for bi in 0..b {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                for kk in 0..k {
                                    let mut s = 0.0;
                                    for (t, gv) in grow.iter().enumerate() {
                                        if let Some(p) = tap(t, kk) {
                                            s += gv * xrow[p];
                                        }
                                    }
                                    gw[(co * cin + ci) * k + kk] += s;
                                }
                            }
                        }
                    }
                    gw
                });
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, || g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::IndexRows { x, idx } => {
                let (n, d) = (self.dims(*x)[0], self.dims(*x)[1]);
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; n * d];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] += g[r * d + j];
                        }
                    }
                    gx
                });
            }
            Op::Gather { x, idx } => {
                let m = self.dims(*x)[1];
                let n = self.value(*x).len();
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; n];
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * m + c] += g[r];
                    }
                    gx
                });
            }
            Op::ScatterSum { src, index } => {
                let d = self.value(*src).len() / index.len().max(1);
                self.acc(grads, *src, || {
                    let mut gs = Vec::with_capacity(index.len() * d);
                    for &t in index {
                        gs.extend_from_slice(&g[t * d..(t + 1) * d]);
                    }
                    gs
                });
            }
            Op::ScatterMax { src, argmax } => {
                let n = self.value(*src).len();
                self.acc(grads, *src, || {
                    let mut gs = vec![0.0; n];
                    for (o, &a) in argmax.iter().enumerate() {
                        if a != usize::MAX {
                            gs[a] += g[o];
                        }
                    }
                    gs
                });
            }
            Op::SegmentSoftmax { scores, index } => {
                let segs = index.iter().copied().max().map_or(0, |m| m + 1);
                self.acc(grads, *scores, || {
                    let mut dot = vec![0.0; segs];
                    for (e, &t) in index.iter().enumerate() {
                        dot[t] += g[e] * out[e];
                    }
                    index
                        .iter()
                        .enumerate()
                        .map(|(e, &t)| out[e] * (g[e] - dot[t]))
                        .collect()
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = node.value.shape().split_at_axis(*axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.dims(v)[*axis];
                    self.acc(grads, v, || {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        gv
                    });
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = self.shape(*x).split_at_axis(*axis);
                let len = node.value.dims()[*axis];
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    gx
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        let contribution = f();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

fn reduce_axis(x: &[f64], outer: usize, n: usize, inner: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let base = (o * n + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += x[base + i];
            }
        }
    }
    if scale != 1.0 {
        out.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2]));
        let b = g.constant(Tensor::zeros([3]));
        let err = g.add(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn invalid_axis_is_an_axis_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 2]));
        assert!(matches!(g.mean_axis(a, 2), Err(Error::Axis { .. })));
        assert!(matches!(g.concat(&[a, a], 5), Err(Error::Axis { .. })));
    }

    #[test]
    fn conv1d_valid_output_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 8]));
        let w = g.constant(Tensor::zeros([1, 1, 3]));
        let y = g.conv1d(x, w, 1, 1, 0).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 1, 6]);
    }

    #[test]
    fn conv1d_matches_hand_convolution() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 2], &[1.0, -1.0]));
        let y = g.conv1d(x, w, 1, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&ps, id);
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut ps).unwrap();
        assert_eq!(ps.get(id).grad.data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_for_negative_inputs() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(x);
        let l = g.sum(r);
        let grads = g.backward_full(l).unwrap();
        assert_eq!(grads[x.index()].as_deref(), Some(&[0.0, 1.0][..]));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let x = g.param(&ps, id);
        let y = g.scale(x, 5.0);
        g.backward(y, &mut ps).unwrap();
        g.backward(y, &mut ps).unwrap();
        assert_eq!(ps.get(id).grad.data(), &[10.0]);
        ps.zero_grad();
        assert_eq!(ps.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g0 = {
            let mut g = Graph::new();
            let x = g.input(Tensor::zeros([2]));
            (g.backward_full(x), x)
        };
        assert!(matches!(g0.0, Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::eval();
        let mut rng = Rng::new(1);
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn dropout_rescales_kept_units() {
        let mut g = Graph::new();
        let mut rng = Rng::new(2);
        let x = g.constant(Tensor::full([1000], 1.0));
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_subexpression_sums_contributions() {
        // f = (x*y) + (x*y) computed once and reused, against two separate copies.
        let eval = |dup: bool| {
            let mut g = Graph::new();
            let x = g.input(Tensor::vector(vec![1.5, -0.5]));
            let y = g.input(Tensor::vector(vec![2.0, 3.0]));
            let p = g.mul(x, y).unwrap();
            let q = if dup { g.mul(x, y).unwrap() } else { p };
            let s = g.add(p, q).unwrap();
            let l = g.sum(s);
            let grads = g.backward_full(l).unwrap();
            (grads[x.index()].clone().unwrap(), grads[y.index()].clone().unwrap())
        };
        assert_eq!(eval(false), eval(true));
        assert_eq!(eval(false).0, vec![4.0, 6.0]);
    }

    #[test]
    fn scatter_and_segment_ops() {
        let mut g = Graph::new();
        let src = g.constant(t(&[3, 1], &[1.0, 2.0, 5.0]));
        let s = g.scatter_sum(src, &[0, 0, 1], 3).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 5.0, 0.0]);
        let m = g.scatter_max(src, &[0, 0, 1], 3).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 5.0, 0.0]);
        let sc = g.constant(Tensor::vector(vec![0.0, 0.0, 7.0]));
        let p = g.segment_softmax(sc, &[0, 0, 1], 2).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5, 1.0]);
    }
}
