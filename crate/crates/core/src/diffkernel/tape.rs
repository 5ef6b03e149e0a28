//! The recording tape: forward primitives append nodes, `backward` walks
//! them in reverse.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C0: f64 = 0.797_884_560_8;
const GELU_C1: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
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
    Linear { x: Var, w: Var, b: Var },
    Conv1dK1 { x: Var, w: Var, b: Var },
    Affine { x: Var, alpha: Var, beta: Var },
    Gelu(Var),
    AvgPool(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SumAll(Var),
    SumRows(Var),
    NormalizeSum(Var),
    Reshape(Var),
    TransposeLast2(Var),
    ConcatLast(Var, Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    GatherFlat { x: Var, idx: Vec<usize> },
    MaskedRenorm { p: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed primitives. Nodes are stored in execution
/// order, which is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient buffer per node that the loss
/// depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<usize>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`; disconnected nodes receive zeros.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0]],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies the current value of `v` into a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    /// `y = x·W + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) || bs != [ws[1]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (inp, out) = (ws[0], ws[1]);
        let rows = numel(&xs) / inp;
        let mut y: Vec<f64> = std::iter::repeat_n(self.value(b), rows).flatten().copied().collect();
        gemm(
            MatRef::new(self.value(x), rows, inp),
            MatRef::new(self.value(w), inp, out),
            &mut y,
            1.0,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(shape, y, Op::Linear { x, w, b }, rg))
    }

    /// Kernel-size-1 convolution: `x[…, C_in, T]`, `w[C_out, C_in]`, `b[C_out]`.
    pub fn conv1d_k1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || ws.len() != 2 || xs[xs.len() - 2] != ws[1] || bs != [ws[0]] {
            return Err(Error::Shape {
                op: "conv1d_k1",
                lhs: xs,
                rhs: ws,
            });
        }
        let (c_out, c_in, t) = (ws[0], ws[1], xs[xs.len() - 1]);
        let batch = numel(&xs) / (c_in * t);
        let mut y = vec![0.0; batch * c_out * t];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for n in 0..batch {
            let yb = &mut y[n * c_out * t..(n + 1) * c_out * t];
            for (o, row) in yb.chunks_mut(t).enumerate() {
                row.fill(bv[o]);
            }
            gemm(
                MatRef::new(wv, c_out, c_in),
                MatRef::new(&xv[n * c_in * t..(n + 1) * c_in * t], c_in, t),
                yb,
                1.0,
            );
        }
        let mut shape = xs;
        let k = shape.len() - 2;
        shape[k] = c_out;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(shape, y, Op::Conv1dK1 { x, w, b }, rg))
    }

    /// `y[…, d] = alpha[d]·x[…, d] + beta[d]`.
    pub fn affine(&mut self, x: Var, alpha: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(alpha) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "affine",
                lhs: xs,
                rhs: self.shape(alpha).to_vec(),
            });
        }
        let (a, b) = (self.value(alpha), self.value(beta));
        let y = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(a).zip(b).map(|((x, a), b)| a * x + b))
            .collect();
        let rg = self.rg(&[x, alpha, beta]);
        Ok(self.push(xs, y, Op::Affine { x, alpha, beta }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    /// Mean over the trailing axis: `[…, C, T] → […, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: xs,
                rhs: vec![],
            });
        }
        let t = *xs.last().unwrap();
        let y = self
            .value(x)
            .chunks(t)
            .map(|c| c.iter().sum::<f64>() / t as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(xs[..xs.len() - 1].to_vec(), y, Op::AvgPool(x), rg))
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let mut y = self.value(x).to_vec();
        for row in y.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Softmax(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the leading axis: `[B, …] → […]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                lhs: xs,
                rhs: vec![],
            });
        }
        let w = numel(&xs[1..]);
        let mut y = vec![0.0; w];
        for row in self.value(x).chunks(w) {
            add_into(&mut y, row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(xs[1..].to_vec(), y, Op::SumRows(x), rg))
    }

    /// `x / Σx` for a rank-1 tensor.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 {
            return Err(Error::Shape {
                op: "normalize_sum",
                lhs: xs,
                rhs: vec![],
            });
        }
        let s: f64 = self.value(x).iter().sum();
        if s == 0.0 {
            return Err(Error::Numeric("normalize_sum of zero-sum tensor".into()));
        }
        let y = self.value(x).iter().map(|v| v / s).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(xs, y, Op::NormalizeSum(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let y = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, y, Op::Reshape(x), rg))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape {
                op: "transpose_last2",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let mut y = vec![0.0; numel(&xs)];
        for (src, dst) in self.value(x).chunks(r * c).zip(y.chunks_mut(r * c)) {
            transpose_block(src, dst, r, c);
        }
        let mut shape = xs;
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, y, Op::TransposeLast2(x), rg))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let y = self
            .value(a)
            .chunks(da)
            .zip(self.value(b).chunks(db))
            .flat_map(|(x, y)| x.iter().chain(y).copied())
            .collect();
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, y, Op::ConcatLast(a, b), rg))
    }

    /// Selects leading-axis rows `rows` of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= xs[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: xs,
                rhs: rows.to_vec(),
            });
        }
        let w = numel(&xs[1..]);
        let v = self.value(x);
        let y = rows.iter().flat_map(|&r| &v[r * w..(r + 1) * w]).copied().collect();
        let mut shape = xs;
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, y, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero tensor with
    /// `total_rows` leading extent; repeated targets accumulate.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total_rows: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if rows.len() != xs[0] || rows.iter().any(|&r| r >= total_rows) {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: xs,
                rhs: rows.to_vec(),
            });
        }
        let w = numel(&xs[1..]);
        let mut y = vec![0.0; total_rows * w];
        for (i, &r) in rows.iter().enumerate() {
            add_into(&mut y[r * w..(r + 1) * w], &self.value(x)[i * w..(i + 1) * w]);
        }
        let mut shape = xs;
        shape[0] = total_rows;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, y, Op::ScatterRows { x, rows: rows.to_vec() }, rg))
    }

    /// Multiplies leading-axis row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if self.shape(s) != [xs[0]] {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: xs,
                rhs: self.shape(s).to_vec(),
            });
        }
        let w = numel(&xs[1..]);
        let sv = self.value(s);
        let y = self
            .value(x)
            .chunks(w)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(xs, y, Op::ScaleRows { x, s }, rg))
    }

    /// Picks elements of `x` by flat row-major index into a rank-1 tensor.
    pub fn gather_flat(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_flat",
                lhs: self.shape(x).to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let v = self.value(x);
        let y = idx.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![idx.len()], y, Op::GatherFlat { x, idx: idx.to_vec() }, rg))
    }

    /// Row-wise renormalization of `p[B, N]` over the entries where `mask`
    /// is set; unmasked entries (and rows with no mask) become zero.
    pub fn masked_renorm(&mut self, p: Var, mask: &[bool]) -> Result<Var> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 2 || mask.len() != numel(&ps) {
            return Err(Error::Shape {
                op: "masked_renorm",
                lhs: ps,
                rhs: vec![mask.len()],
            });
        }
        let n = ps[1];
        let mut y = vec![0.0; mask.len()];
        for ((row, m), out) in self.value(p).chunks(n).zip(mask.chunks(n)).zip(y.chunks_mut(n)) {
            let s: f64 = row.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| v).sum();
            if s > 0.0 {
                for ((o, v), &k) in out.iter_mut().zip(row).zip(m) {
                    if k {
                        *o = v / s;
                    }
                }
            }
        }
        let rg = self.rg(&[p]);
        Ok(self.push(ps, y, Op::MaskedRenorm { p, mask: mask.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        // Only requires-grad nodes carry meaningful gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (inp, out) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = g.len() / out;
                acc(grads, *x, &|dx| {
                    gemm(MatRef::new(g, rows, out), MatRef::t(self.value(*w), inp, out), dx, 1.0)
                });
                acc(grads, *w, &|dw| {
                    gemm(MatRef::t(self.value(*x), rows, inp), MatRef::new(g, rows, out), dw, 1.0)
                });
                acc(grads, *b, &|db| {
                    for row in g.chunks(out) {
                        add_into(db, row);
                    }
                });
            }
            Op::Conv1dK1 { x, w, b } => {
                let (c_out, c_in) = (self.shape(*w)[0], self.shape(*w)[1]);
                let t = *node.shape.last().unwrap();
                let batch = g.len() / (c_out * t);
                let xv = self.value(*x);
                acc(grads, *x, &|dx| {
                    for n in 0..batch {
                        gemm(
                            MatRef::t(self.value(*w), c_out, c_in),
                            MatRef::new(&g[n * c_out * t..(n + 1) * c_out * t], c_out, t),
                            &mut dx[n * c_in * t..(n + 1) * c_in * t],
                            1.0,
                        );
                    }
                });
                acc(grads, *w, &|dw| {
                    for n in 0..batch {
                        gemm(
                            MatRef::new(&g[n * c_out * t..(n + 1) * c_out * t], c_out, t),
                            MatRef::t(&xv[n * c_in * t..(n + 1) * c_in * t], c_in, t),
                            dw,
                            1.0,
                        );
                    }
                });
                acc(grads, *b, &|db| {
                    for (k, row) in g.chunks(t).enumerate() {
                        db[k % c_out] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Affine { x, alpha, beta } => {
                let d = self.shape(*alpha)[0];
                let a = self.value(*alpha);
                let xv = self.value(*x);
                acc(grads, *x, &|dx| {
                    for (k, (o, gi)) in dx.iter_mut().zip(g).enumerate() {
                        *o += a[k % d] * gi;
                    }
                });
                acc(grads, *alpha, &|da| {
                    for (k, (gi, xi)) in g.iter().zip(xv).enumerate() {
                        da[k % d] += gi * xi;
                    }
                });
                acc(grads, *beta, &|db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(grads, *x, &|dx| {
                    for ((o, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_parts(*xi).1;
                    }
                });
            }
            Op::AvgPool(x) => {
                let t = *self.shape(*x).last().unwrap();
                acc(grads, *x, &|dx| {
                    for (row, gi) in dx.chunks_mut(t).zip(g) {
                        for o in row {
                            *o += gi / t as f64;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                acc(grads, *x, &|dx| {
                    for ((o, gi), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let dot: f64 = gi.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((oj, gj), yj) in o.iter_mut().zip(gi).zip(y) {
                            *oj += yj * (gj - dot);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|d| add_into(d, g));
                acc(grads, *b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|d| add_into(d, g));
                acc(grads, *b, &|d| {
                    for (o, gi) in d.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, &|d| {
                    for ((o, gi), y) in d.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(grads, *b, &|d| {
                    for ((o, gi), x) in d.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(grads, *x, &|d| {
                for (o, gi) in d.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::AddConst(x) | Op::Reshape(x) => acc(grads, *x, &|d| add_into(d, g)),
            Op::Exp(x) => acc(grads, *x, &|d| {
                for ((o, gi), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *o += gi * y;
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x);
                acc(grads, *x, &|d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                acc(grads, *x, &|d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        *o += 2.0 * gi * xi;
                    }
                });
            }
            Op::SumAll(x) => acc(grads, *x, &|d| {
                for o in d.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::SumRows(x) => acc(grads, *x, &|d| {
                for row in d.chunks_mut(g.len()) {
                    add_into(row, g);
                }
            }),
            Op::NormalizeSum(x) => {
                let xv = self.value(*x);
                let s: f64 = xv.iter().sum();
                let dot: f64 = g.iter().zip(&node.value).map(|(a, b)| a * b).sum();
                acc(grads, *x, &|d| {
                    for (o, gi) in d.iter_mut().zip(g) {
                        *o += (gi - dot) / s;
                    }
                });
            }
            Op::TransposeLast2(x) => {
                let xs = self.shape(*x);
                let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                acc(grads, *x, &|d| {
                    let mut tmp = vec![0.0; r * c];
                    for (gb, db) in g.chunks(r * c).zip(d.chunks_mut(r * c)) {
                        transpose_block(gb, &mut tmp, c, r);
                        add_into(db, &tmp);
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let (da, db) = (*self.shape(*a).last().unwrap(), *self.shape(*b).last().unwrap());
                acc(grads, *a, &|d| {
                    for (o, gi) in d.chunks_mut(da).zip(g.chunks(da + db)) {
                        add_into(o, &gi[..da]);
                    }
                });
                acc(grads, *b, &|d| {
                    for (o, gi) in d.chunks_mut(db).zip(g.chunks(da + db)) {
                        add_into(o, &gi[da..]);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let w = g.len() / rows.len();
                acc(grads, *x, &|d| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * w..(r + 1) * w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ScatterRows { x, rows } => {
                let w = self.value(*x).len() / rows.len();
                acc(grads, *x, &|d| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let sv = self.value(*s);
                let xv = self.value(*x);
                let w = xv.len() / sv.len();
                acc(grads, *x, &|d| {
                    for ((o, gi), k) in d.chunks_mut(w).zip(g.chunks(w)).zip(sv) {
                        for (oj, gj) in o.iter_mut().zip(gi) {
                            *oj += gj * k;
                        }
                    }
                });
                acc(grads, *s, &|d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g.chunks(w)).zip(xv.chunks(w)) {
                        *o += gi.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::GatherFlat { x, idx } => acc(grads, *x, &|d| {
                for (&i, gi) in idx.iter().zip(g) {
                    d[i] += gi;
                }
            }),
            Op::MaskedRenorm { p, mask } => {
                let n = node.shape[1];
                let pv = self.value(*p);
                acc(grads, *p, &|d| {
                    for (((o, gi), y), (m, pr)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(node.value.chunks(n))
                        .zip(mask.chunks(n).zip(pv.chunks(n)))
                    {
                        let s: f64 = pr.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| v).sum();
                        if s <= 0.0 {
                            continue;
                        }
                        let dot: f64 = gi.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((oj, gj), &k) in o.iter_mut().zip(gi).zip(m) {
                            if k {
                                *oj += (gj - dot) / s;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn transpose_block(src: &[f64], dst: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}
