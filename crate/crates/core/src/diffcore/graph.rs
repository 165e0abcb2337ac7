use super::tensor::{numel, Scalar, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    /// Max or min along an axis; `arg` holds the flat source index for each
    /// output element.
    Extremum { x: Var, arg: Vec<usize> },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var),
    SqDiff(Var, Var),
    PairwiseSqDist(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Extremum { .. } => "extremum",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::SqDiff(..) => "sq_diff",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated for leaves that require grad.
    grad: Option<Vec<T>>,
    /// Per-op saved buffer (layer norm keeps its reciprocal std here).
    saved: Vec<T>,
}

/// Arena-backed computation graph for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the arena order is a valid
/// topological order and `backward` simply walks it in reverse. All
/// reductions sum left to right, which keeps results bitwise reproducible.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![T::zero(); value.numel()]);
        let v = self.push(value, Op::Leaf, requires_grad);
        self.nodes[v.0].grad = grad;
        v
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Accumulated gradient of a leaf. Leaves that were never reached hold zeros.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn map_binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let vx = &self.nodes[x.0].value;
        let out = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        self.map_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        self.map_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        self.map_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sq_diff(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sq_diff");
        self.map_binary(a, b, Op::SqDiff(a, b), |x, y| (x - y) * (x - y))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, add: bool) -> Var {
        let vx = &self.nodes[x.0].value;
        let vr = &self.nodes[r.0].value;
        let d = vr.numel();
        assert_eq!(vr.shape().len(), 1, "row operand must be 1-D");
        assert_eq!(
            vx.shape().last().copied(),
            Some(d),
            "row broadcast: last dim of {:?} != {}",
            vx.shape(),
            d
        );
        let rd = vr.data();
        let data = vx
            .data()
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(rd)
                    .map(move |(&a, &b)| if add { a + b } else { a * b })
            })
            .collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(r);
        let op = if add { Op::AddRow(x, r) } else { Op::MulRow(x, r) };
        self.push(out, op, rg)
    }

    /// `x + b` with `b` broadcast along the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        self.row_broadcast(x, b, true)
    }

    /// `x * w` with `w` broadcast along the last axis.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Var {
        self.row_broadcast(x, w, false)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::from_f64_lossy(c);
        self.map_unary(x, Op::Scale(x, c), |v| v * ct)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert!(
            va.shape().len() == 2 && vb.shape().len() == 2 && va.shape()[1] == vb.shape()[0],
            "matmul: incompatible shapes {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 2, "transpose expects 2-D");
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let out = transpose_data(vx.data(), r, c);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(numel(shape), vx.numel(), "reshape {:?} -> {:?}", vx.shape(), shape);
        let out = Tensor::from_parts(shape.to_vec(), vx.data().to_vec());
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(&v.shape()[1..], &tail[..], "concat: trailing dims differ");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg)
    }

    /// Concatenates 2-D tensors along the second axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(s.len() == 2 && s[0] == rows, "concat_cols: bad shape {s:?}");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 2, "slice_cols expects 2-D");
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&vx.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols(x, start), rg)
    }

    /// Selects rows (indices along the first axis). Indices may repeat.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let w = vx.row_width();
        let rows = vx.shape()[0];
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            assert!(i < rows, "gather index {i} out of range {rows}");
            data.extend_from_slice(&vx.data()[i * w..(i + 1) * w]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&vx.shape()[1..]);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::Gather(x, idx.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let n = T::from_usize(v.numel()).unwrap();
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b) / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis_sum(&self, x: Var, axis: usize) -> (Vec<usize>, Vec<T>, usize) {
        let v = &self.nodes[x.0].value;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        (shape, out, len)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let (shape, out, _) = self.reduce_axis_sum(x, axis);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis), rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let (shape, mut out, len) = self.reduce_axis_sum(x, axis);
        let n = T::from_usize(len).unwrap();
        out.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::MeanAxis(x, axis), rg)
    }

    fn extremum(&mut self, x: Var, axis: usize, want_max: bool) -> Var {
        let v = &self.nodes[x.0].value;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        assert!(len > 0, "reduction over empty axis");
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        let d = v.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut best_idx = o * len * inner + i;
                let mut best = d[best_idx];
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    let c = d[idx];
                    // strict comparison keeps the lowest index on ties
                    if (want_max && c > best) || (!want_max && c < best) {
                        best = c;
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Extremum { x, arg }, rg)
    }

    /// Max along `axis`; the gradient goes to the lowest-index maximizer.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Var {
        self.extremum(x, axis, true)
    }

    /// Min along `axis`; the gradient goes to the lowest-index minimizer.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Var {
        self.extremum(x, axis, false)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `log(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::LogSigmoid(x), |v| -softplus(-v))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_K);
        let half = T::from_f64_lossy(0.5);
        self.map_unary(x, Op::Gelu(x), |v| {
            half * v * (T::one() + (c * (v + k * v * v * v)).tanh())
        })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let d = *v.shape().last().expect("softmax of scalar");
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let start = out.len();
            let mut z = T::zero();
            for &r in row {
                let e = (r - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(v.shape().to_vec(), out), Op::Softmax(x), rg)
    }

    /// Layer normalization along the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = &self.nodes[x.0].value;
        let d = *v.shape().last().expect("layer_norm of scalar");
        let dn = T::from_usize(d).unwrap();
        let eps = T::from_f64_lossy(eps);
        let mut out = Vec::with_capacity(v.numel());
        let mut rstds = Vec::with_capacity(v.numel() / d);
        for row in v.data().chunks_exact(d) {
            let mu = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mu) * (b - mu)) / dn;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&r| (r - mu) * rstd));
            rstds.push(rstd);
        }
        let rg = self.rg(x);
        let out = self.push(Tensor::from_parts(v.shape().to_vec(), out), Op::LayerNorm(x), rg);
        self.nodes[out.0].saved = rstds;
        out
    }

    /// Squared Euclidean distances between every pair of points of two
    /// batched point sets: `[B, n, c] x [B, m, c] -> [B, n, m]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "pairwise_sq_dist: shapes {sa:?} and {sb:?}"
        );
        let (bt, n, m, c) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Vec::with_capacity(bt * n * m);
        for t in 0..bt {
            for i in 0..n {
                let p = &va.data()[(t * n + i) * c..(t * n + i + 1) * c];
                for j in 0..m {
                    let q = &vb.data()[(t * m + j) * c..(t * m + j + 1) * c];
                    let mut s = T::zero();
                    for (&x, &y) in p.iter().zip(q) {
                        s += (x - y) * (x - y);
                    }
                    out.push(s);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(vec![bt, n, m], out),
            Op::PairwiseSqDist(a, b),
            rg,
        )
    }

    /// Propagates gradients from a scalar root into every reachable leaf that
    /// requires grad. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(invalid!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let acc = self.nodes[i].grad.as_mut().expect("leaf grad buffer");
                for (a, &b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Returns the gradient buffer of `v`, or None if it needs no gradient.
        let mut slot = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        let two = T::from_f64_lossy(2.0);

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                slot(*a, &mut |ga| add_assign(ga, g));
                slot(*b, &mut |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                slot(*a, &mut |ga| add_assign(ga, g));
                slot(*b, &mut |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                slot(*a, &mut |ga| {
                    for ((x, &gy), &w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * w;
                    }
                });
                slot(*b, &mut |gb| {
                    for ((x, &gy), &w) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * w;
                    }
                });
            }
            Op::SqDiff(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                slot(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += two * (va[k] - vb[k]) * g[k];
                    }
                });
                slot(*b, &mut |gb| {
                    for (k, x) in gb.iter_mut().enumerate() {
                        *x -= two * (va[k] - vb[k]) * g[k];
                    }
                });
            }
            Op::AddRow(x, r) => {
                let d = nodes[r.0].value.numel();
                slot(*x, &mut |gx| add_assign(gx, g));
                slot(*r, &mut |gr| {
                    for row in g.chunks_exact(d) {
                        add_assign(gr, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let d = nodes[r.0].value.numel();
                let (vx, vr) = (val(*x), val(*r));
                slot(*x, &mut |gx| {
                    for (gxr, gr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for ((a, &b), &w) in gxr.iter_mut().zip(gr).zip(vr) {
                            *a += b * w;
                        }
                    }
                });
                slot(*r, &mut |gw| {
                    for (xr, gr) in vx.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for ((a, &b), &xv) in gw.iter_mut().zip(gr).zip(xr) {
                            *a += b * xv;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = T::from_f64_lossy(*c);
                slot(*x, &mut |gx| {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += c * b;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                slot(*a, &mut |ga| {
                    // dA = dC * B^T
                    let bt = transpose_data(vb, k, n);
                    matmul_into(g, &bt, ga, m, n, k);
                });
                slot(*b, &mut |gb| {
                    // dB = A^T * dC
                    let at = transpose_data(va, m, k);
                    matmul_into(&at, g, gb, k, m, n);
                });
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                slot(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => slot(*x, &mut |gx| add_assign(gx, g)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    slot(p, &mut |gp| add_assign(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = nodes[parts[0].0].value.shape()[0];
                let total: usize = parts.iter().map(|p| nodes[p.0].value.shape()[1]).sum();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    slot(p, &mut |gp| {
                        for r in 0..rows {
                            add_assign(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                            );
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols(x, start) => {
                let c = nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                let r = node.value.shape()[0];
                slot(*x, &mut |gx| {
                    for i in 0..r {
                        add_assign(
                            &mut gx[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::Gather(x, idx) => {
                let w = nodes[x.0].value.row_width();
                slot(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_assign(&mut gx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Sum(x) => slot(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(nodes[x.0].value.numel()).unwrap();
                let s = g[0] / n;
                slot(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let div = match &node.op {
                    Op::MeanAxis(..) => T::from_usize(len).unwrap(),
                    _ => T::one(),
                };
                slot(*x, &mut |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s / div;
                            }
                        }
                    }
                });
            }
            Op::Extremum { x, arg } => {
                slot(*x, &mut |gx| {
                    for (&a, &gy) in arg.iter().zip(g) {
                        gx[a] += gy;
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                slot(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(x) => {
                let vx = val(*x);
                slot(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += g[k] / vx[k];
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                slot(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * y[k] * (T::one() - y[k]);
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let vx = val(*x);
                slot(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * sigmoid(-vx[k]);
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                let c = T::from_f64_lossy(GELU_C);
                let kk = T::from_f64_lossy(GELU_K);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                slot(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        let v = vx[k];
                        let t = (c * (v + kk * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * kk * v * v);
                        gx[k] += g[k] * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                slot(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                    {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let dn = T::from_usize(d).unwrap();
                let rstds = &node.saved;
                slot(*x, &mut |gx| {
                    for (r, ((gxr, gr), yr)) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                        .enumerate()
                    {
                        let mg = gr.iter().fold(T::zero(), |a, &b| a + b) / dn;
                        let mgy = gr.iter().zip(yr).fold(T::zero(), |a, (&p, &q)| a + p * q) / dn;
                        for j in 0..d {
                            gxr[j] += rstds[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (bt, n, m, c) = (sa[0], sa[1], sb[1], sa[2]);
                let (va, vb) = (val(*a), val(*b));
                slot(*a, &mut |ga| {
                    for t in 0..bt {
                        for i in 0..n {
                            for j in 0..m {
                                let gy = g[(t * n + i) * m + j];
                                for q in 0..c {
                                    let diff = va[(t * n + i) * c + q] - vb[(t * m + j) * c + q];
                                    ga[(t * n + i) * c + q] += two * diff * gy;
                                }
                            }
                        }
                    }
                });
                slot(*b, &mut |gb| {
                    for t in 0..bt {
                        for i in 0..n {
                            for j in 0..m {
                                let gy = g[(t * n + i) * m + j];
                                for q in 0..c {
                                    let diff = va[(t * n + i) * c + q] - vb[(t * m + j) * c + q];
                                    gb[(t * m + j) * c + q] -= two * diff * gy;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v) = max(v, 0) + log(1 + e^{-|v|})
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn transpose_data<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `out += a[m,k] * b[k,n]`, accumulated row by row in a fixed order.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
