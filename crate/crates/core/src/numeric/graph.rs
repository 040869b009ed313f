//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.
//! Parameters are referenced from a borrowed [`ParamStore`] rather than
//! copied, which keeps short inference graphs cheap.

use std::rc::Rc;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, softmax_rows_into, Tensor, View};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    SegmentSum {
        x: Var,
        seg: Vec<Option<usize>>,
    },
    Custom {
        inputs: Vec<Var>,
        local: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of tensor operations.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::scalar(0.0), Op::Param(id))
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    fn dims(&self, v: Var, t: bool) -> (usize, usize) {
        let x = self.value(v);
        if t {
            (x.cols(), x.rows())
        } else {
            (x.rows(), x.cols())
        }
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, k) = self.dims(a, ta);
        let (k2, n) = self.dims(b, tb);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?}{} x {:?}{}",
                self.value(a).shape(),
                if ta { "ᵀ" } else { "" },
                self.value(b).shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            view(self.value(a), ta),
            view(self.value(b), tb),
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b)))
    }

    /// Adds a bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} for {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % c])
            .collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * c).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let c = xv.cols();
        if g.len() != c || b.len() != c {
            return Err(Error::Shape("layer norm gain/bias width".into()));
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax over entries allowed by `keep` (row-major, same shape
    /// as `x`); disallowed entries get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, keep: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(k) = &keep {
            if k.len() != xv.len() {
                return Err(Error::Shape("softmax mask size".into()));
            }
        }
        let mut out = vec![0.0; xv.len()];
        softmax_rows_into(
            xv.data(),
            keep.as_deref().map(|k| k.as_slice()),
            xv.cols(),
            &mut out,
        );
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.masked_softmax(x, None).expect("unmasked softmax")
    }

    /// Row-wise log-softmax; masked entries are `-inf`.
    pub fn log_softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(k) = keep {
            if k.len() != xv.len() {
                return Err(Error::Shape("log-softmax mask size".into()));
            }
        }
        let mut out = vec![f64::NEG_INFINITY; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let allowed = |j: usize| keep.map_or(true, |k| k[r * c + j]);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max
                + (0..c)
                    .filter(|&j| allowed(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in (0..c).filter(|&j| allowed(j)) {
                out[r * c + j] = row[j] - lse;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x }))
    }

    /// Row lookup (`out[i] = table[ids[i]]`).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape(format!("row {bad} out of {}", t.rows())));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks flat (row-major) entries into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Shape(format!("index {bad} out of {}", xv.len())));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::Shape(format!("cols {start}+{len} of {c}")));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rows = xv.rows();
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], data),
            Op::SliceCols { x, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Sums vector entries into `n` buckets; `None` entries are dropped.
    pub fn segment_sum(&mut self, x: Var, seg: &[Option<usize>], n: usize) -> Result<Var> {
        let xv = self.value(x);
        if seg.len() != xv.len() || seg.iter().flatten().any(|&s| s >= n) {
            return Err(Error::Shape("segment ids".into()));
        }
        let mut out = vec![0.0; n];
        for (v, s) in xv.data().iter().zip(seg) {
            if let Some(s) = s {
                out[*s] += v;
            }
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::SegmentSum {
                x,
                seg: seg.to_vec(),
            },
        ))
    }

    /// A scalar computed outside the tape, with its local gradient with
    /// respect to each input supplied by the caller.
    pub fn custom_scalar(
        &mut self,
        value: f64,
        inputs: &[Var],
        local: Vec<Vec<f64>>,
    ) -> Result<Var> {
        if inputs.len() != local.len()
            || inputs
                .iter()
                .zip(&local)
                .any(|(&v, g)| self.value(v).len() != g.len())
        {
            return Err(Error::Shape("custom op gradient shapes".into()));
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                local,
            },
        ))
    }

    /// Back-propagates from the scalar `root` and adds parameter gradients
    /// into `grads`.
    pub fn backward(&self, root: Var, grads: &mut Grads) -> Result<()> {
        self.backward_scaled(root, 1.0, grads)
    }

    pub fn backward_scaled(&self, root: Var, seed: f64, grads: &mut Grads) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        g[root.0] = Some(vec![seed]);
        for i in (0..=root.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            self.propagate(i, &dy, &mut g, grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Const => {}
            Op::Param(id) => {
                for (a, b) in grads.get_mut(*id).data_mut().iter_mut().zip(dy) {
                    *a += b;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = self.dims(*a, *ta);
                let n = node.value.cols();
                let dc = View::new(dy, n, 1);
                // d op(a) = dC · op(b)ᵀ, written straight into a's layout.
                {
                    let ga = acc(g, a.0, av.len());
                    if *ta {
                        // a is k×m: da = op(b) · dCᵀ
                        gemm(k, n, m, view(bv, *tb), transpose(dc), ga, 1.0);
                    } else {
                        gemm(m, n, k, dc, transpose(view(bv, *tb)), ga, 1.0);
                    }
                }
                {
                    let gb = acc(g, b.0, bv.len());
                    if *tb {
                        // b is n×k: db = dCᵀ · op(a)
                        gemm(n, m, k, transpose(dc), view(av, *ta), gb, 1.0);
                    } else {
                        gemm(k, m, n, transpose(view(av, *ta)), dc, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(g, a.0, dy.len()), dy);
                add_into(acc(g, b.0, dy.len()), dy);
            }
            Op::AddRow(a, bias) => {
                add_into(acc(g, a.0, dy.len()), dy);
                let c = self.value(*bias).len();
                let gb = acc(g, bias.0, c);
                for (j, v) in dy.iter().enumerate() {
                    gb[j % c] += v;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = acc(g, a.0, dy.len());
                for ((x, d), y) in ga.iter_mut().zip(dy).zip(bv) {
                    *x += d * y;
                }
                let gb = acc(g, b.0, dy.len());
                for ((x, d), y) in gb.iter_mut().zip(dy).zip(av) {
                    *x += d * y;
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(g, a.0, dy.len());
                for (x, d) in ga.iter_mut().zip(dy) {
                    *x += c * d;
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let ga = acc(g, a.0, dy.len());
                for ((o, d), &x) in ga.iter_mut().zip(dy).zip(xv) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *o += d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let c = gv.len();
                let rows = dy.len() / c;
                {
                    let gg = acc(g, gain.0, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += dy[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                {
                    let gbias = acc(g, bias.0, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gbias[j] += dy[r * c + j];
                        }
                    }
                }
                let gx = acc(g, x.0, dy.len());
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let dh = dy[r * c + j] * gv[j];
                        mean_d += dh;
                        mean_dx += dh * xhat[r * c + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let dh = dy[r * c + j] * gv[j];
                        gx[r * c + j] += rstd[r] * (dh - mean_d - xhat[r * c + j] * mean_dx);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = acc(g, x.0, dy.len());
                for r in 0..y.len() / c {
                    let s = r * c;
                    let dot: f64 = (s..s + c).map(|j| y[j] * dy[j]).sum();
                    for j in s..s + c {
                        gx[j] += y[j] * (dy[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = acc(g, x.0, dy.len());
                for r in 0..y.len() / c {
                    let s = r * c;
                    let total: f64 = (s..s + c)
                        .filter(|&j| y[j] != f64::NEG_INFINITY)
                        .map(|j| dy[j])
                        .sum();
                    for j in s..s + c {
                        if y[j] != f64::NEG_INFINITY {
                            gx[j] += dy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let c = node.value.cols();
                let len = self.value(*table).len();
                let gt = acc(g, table.0, len);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += dy[r * c + j];
                    }
                }
            }
            Op::Pick { x, idx } => {
                let len = self.value(*x).len();
                let gx = acc(g, x.0, len);
                for (&i, d) in idx.iter().zip(dy) {
                    gx[i] += d;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), node.value.cols());
                let gx = acc(g, x.0, xv.len());
                for r in 0..xv.rows() {
                    for j in 0..len {
                        gx[r * c + start + j] += dy[r * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    let gp = acc(g, p.0, rows * pc);
                    for r in 0..rows {
                        for j in 0..pc {
                            gp[r * pc + j] += dy[r * total + off + j];
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    add_into(acc(g, p.0, n), &dy[off..off + n]);
                    off += n;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                acc(g, x.0, len).iter_mut().for_each(|v| *v += dy[0]);
            }
            Op::SegmentSum { x, seg } => {
                let gx = acc(g, x.0, seg.len());
                for (o, s) in gx.iter_mut().zip(seg) {
                    if let Some(s) = s {
                        *o += dy[*s];
                    }
                }
            }
            Op::Custom { inputs, local } => {
                for (v, l) in inputs.iter().zip(local) {
                    let gv = acc(g, v.0, l.len());
                    for (o, d) in gv.iter_mut().zip(l) {
                        if *d != 0.0 {
                            *o += dy[0] * d;
                        }
                    }
                }
            }
        }
    }
}

fn view(t: &Tensor, transposed: bool) -> View<'_> {
    let c = t.cols();
    if transposed {
        View::new(t.data(), 1, c)
    } else {
        View::new(t.data(), c, 1)
    }
}

fn transpose(v: View<'_>) -> View<'_> {
    View {
        data: v.data,
        rs: v.cs,
        cs: v.rs,
    }
}

fn acc(g: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    g[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        for (n, sh) in shapes {
            s.add_normal(n, sh, 0.7, &mut rng).unwrap();
        }
        s
    }

    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Result<Var>,
    {
        let report = grad_check(
            store,
            |s| {
                let mut g = Graph::new(s);
                let out = f(&mut g)?;
                let mut grads = Grads::zeros_like(s);
                g.backward(out, &mut grads)?;
                Ok((g.value(out).item(), grads))
            },
            1e-5,
            200,
            11,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_transposes_have_correct_gradients() {
        let mut s = store_with(&[
            ("a", &[3, 4]),
            ("b", &[4, 2]),
            ("c", &[2, 4]),
            ("w", &[3, 2]),
        ]);
        check(&mut s, |g| {
            let (a, b, c, w) = (
                g.param_by_name("a")?,
                g.param_by_name("b")?,
                g.param_by_name("c")?,
                g.param_by_name("w")?,
            );
            let p = g.matmul(a, b)?; // 3x2
            let q = g.matmul_t(a, c, false, true)?; // 3x2
            let r = g.matmul_t(a, w, true, false)?; // 4x2
            let rr = g.matmul_t(r, b, true, false)?; // 2x2
            let pq = g.mul(p, q)?;
            let s1 = g.sum(pq);
            let s2 = g.sum(rr);
            let t = g.mul(s1, s2)?;
            let sq = g.matmul_t(w, w, true, false)?; // 2x2
            let u = g.sum(sq);
            g.add(t, u)
        });
    }

    #[test]
    fn nonlinearities_have_correct_gradients() {
        let mut s = store_with(&[("x", &[3, 5]), ("g", &[5]), ("b", &[5]), ("t", &[5, 3])]);
        check(&mut s, |g| {
            let x = g.param_by_name("x")?;
            let gain = g.param_by_name("g")?;
            let bias = g.param_by_name("b")?;
            let t = g.param_by_name("t")?;
            let n = g.layer_norm(x, gain, bias)?;
            let a = g.gelu(n);
            let a = g.add_row(a, bias)?;
            let keep = Rc::new((0..15).map(|i| i % 4 != 1).collect::<Vec<_>>());
            let sm = g.masked_softmax(a, Some(keep))?;
            let lsm = g.log_softmax(a, None)?;
            let m = g.mul(sm, lsm)?;
            let e = g.gather_rows(t, &[4, 0, 4])?;
            let e = g.slice_cols(e, 1, 2)?;
            let m2 = g.slice_cols(m, 0, 3)?;
            let cat = g.concat_cols(&[m2, e])?;
            let rows = g.concat_rows(&[cat, cat])?;
            let sc = g.scale(rows, -0.3);
            let picked = g.pick(sc, &[0, 3, 7, 29, 29])?;
            let seg = g.segment_sum(picked, &[Some(1), None, Some(0), Some(1), Some(1)], 2)?;
            let total = g.sum(seg);
            let all = g.sum(m);
            g.add(total, all)
        });
    }

    #[test]
    fn custom_scalar_routes_local_gradients() {
        let mut s = store_with(&[("v", &[3])]);
        check(&mut s, |g| {
            let v = g.param_by_name("v")?;
            let vals = g.value(v).data().to_vec();
            let lse = crate::numeric::log_sum_exp(&vals);
            let local: Vec<f64> = vals.iter().map(|x| (x - lse).exp()).collect();
            g.custom_scalar(lse, &[v], vec![local])
        });
    }
}
