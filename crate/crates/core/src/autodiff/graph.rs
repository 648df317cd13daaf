use std::borrow::Cow;

use super::tensor::{axpy, dot, matmul_acc, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Recorded primitive. Only nodes that depend on a gradient-tracking leaf
/// keep their op; everything else is stored as a constant.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: usize },
    AddBias(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    ShiftRows { x: Var, offset: isize },
    Pick { x: Var, cols: Vec<usize> },
    Clamp { x: Var, lo: f64, hi: f64 },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// vector is already a topological order and backward is a reverse sweep.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shapes(ts: &[&Tensor]) -> Vec<Vec<usize>> {
    ts.iter().map(|t| t.shape().to_vec()).collect()
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// Borrowed non-trainable leaf.
    pub fn input(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    /// Owned trainable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), true)
    }

    /// Owned non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(AutodiffError::Shape {
                op: name,
                shapes: shapes(&[ta, tb]),
            });
        }
        Ok(ta.dims2())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, Tensor::from_parts(r, c, data), op, &[a, b])
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(name, Tensor::from_parts(r, c, data), op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                shapes: shapes(&[ta, tb]),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// Concatenate along axis 0 (stack rows) or axis 1 (join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyAxis { op: "concat" });
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let mismatch = || AutodiffError::Shape {
            op: "concat",
            shapes: parts.iter().map(|&p| self.value(p).shape().to_vec()).collect(),
        };
        let value = match axis {
            0 => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(mismatch());
                }
                let mut data = Vec::with_capacity(dims.iter().map(|d| d.0 * cols).sum());
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::from_parts(data.len() / cols.max(1), cols, data)
            }
            1 => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(mismatch());
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::from_parts(rows, cols, data)
            }
            _ => return Err(AutodiffError::Axis { op: "concat", axis }),
        };
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, Op::Log(x), f64::ln)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    /// Clamp to `[lo, hi]`; the gradient passes only where the input lies
    /// inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Sum over one axis (keeping it as size 1), or over everything.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let value = match axis {
            None => Tensor::scalar(t.data().iter().sum()),
            Some(0) => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    axpy(1.0, t.row_slice(i), &mut out);
                }
                Tensor::from_parts(1, c, out)
            }
            Some(1) => Tensor::from_parts(r, 1, (0..r).map(|i| t.row_slice(i).iter().sum()).collect()),
            Some(axis) => return Err(AutodiffError::Axis { op: "sum", axis }),
        };
        self.push("sum", value, Op::Sum { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.sum(x, None)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let n = match axis {
            0 => r,
            1 => c,
            _ => return Err(AutodiffError::Axis { op: "mean", axis }),
        };
        if n == 0 {
            return Err(AutodiffError::EmptyAxis { op: "mean" });
        }
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                axpy(1.0, t.row_slice(i), &mut out);
            }
            out.iter_mut().for_each(|v| *v /= n as f64);
            Tensor::from_parts(1, c, out)
        } else {
            let out = (0..r).map(|i| t.row_slice(i).iter().sum::<f64>() / n as f64).collect();
            Tensor::from_parts(r, 1, out)
        };
        self.push("mean", value, Op::Mean { x, axis }, &[x])
    }

    /// `x (r x c) + b (1 x c)`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (r, c) = tx.dims2();
        if tb.dims2() != (1, c) {
            return Err(AutodiffError::Shape {
                op: "add_bias",
                shapes: shapes(&[tx, tb]),
            });
        }
        let bias = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        self.push("add_bias", Tensor::from_parts(r, c, data), Op::AddBias(x, b), &[x, b])
    }

    /// `x w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Select rows of `table` by index, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Index {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(ids.len(), c, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Numerically stabilised softmax over each slice along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let value = match axis {
            1 => {
                if c == 0 {
                    return Err(AutodiffError::EmptyAxis { op: "softmax" });
                }
                let mut data = t.data().to_vec();
                for row in data.chunks_mut(c) {
                    softmax_in_place(row);
                }
                Tensor::from_parts(r, c, data)
            }
            0 => {
                if r == 0 {
                    return Err(AutodiffError::EmptyAxis { op: "softmax" });
                }
                let mut data = vec![0.0; r * c];
                let mut col = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = t.data()[i * c + j];
                    }
                    softmax_in_place(&mut col);
                    for i in 0..r {
                        data[i * c + j] = col[i];
                    }
                }
                Tensor::from_parts(r, c, data)
            }
            _ => return Err(AutodiffError::Axis { op: "softmax", axis }),
        };
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if c == 0 {
            return Err(AutodiffError::EmptyAxis { op: "log_softmax" });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", Tensor::from_parts(r, c, data), Op::LogSoftmax(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(c, r, data), Op::Transpose(x), &[x])
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if start + len > r {
            return Err(AutodiffError::Index {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::from_parts(len, c, data), Op::SliceRows { x, start }, &[x])
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    /// Output row `j` is input row `j + offset`, or zeros past either end.
    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut data = vec![0.0; r * c];
        for j in 0..r {
            let src = j as isize + offset;
            if src >= 0 && (src as usize) < r {
                data[j * c..(j + 1) * c].copy_from_slice(t.row_slice(src as usize));
            }
        }
        self.push("shift_rows", Tensor::from_parts(r, c, data), Op::ShiftRows { x, offset }, &[x])
    }

    /// `out[i] = x[i, cols[i]]`, an `r x 1` column.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if cols.len() != r {
            return Err(AutodiffError::Shape {
                op: "pick",
                shapes: vec![t.shape().to_vec(), vec![cols.len()]],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(AutodiffError::Index {
                op: "pick",
                index: bad,
                len: c,
            });
        }
        let data = cols.iter().enumerate().map(|(i, &j)| t.data()[i * c + j]).collect();
        self.push(
            "pick",
            Tensor::from_parts(r, 1, data),
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated by
    /// summation wherever a node fans out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf))
                    .map(|d| {
                        let (r, c) = n.value.dims2();
                        Tensor::from_parts(r, c, d)
                    })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| axpy(1.0, g, ga));
                self.accumulate(grads, *b, |gb| axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| axpy(1.0, g, ga));
                self.accumulate(grads, *b, |gb| axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, tb.row_slice(p));
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(ta.data()[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2();
                    if *axis == 0 {
                        let span = &g[offset * cols..(offset + pr) * cols];
                        self.accumulate(grads, p, |gp| axpy(1.0, span, gp));
                        offset += pr;
                    } else {
                        self.accumulate(grads, p, |gp| {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                axpy(1.0, src, &mut gp[r * pc..(r + 1) * pc]);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |gx| {
                for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |gx| {
                for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |gx| {
                for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            }),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(vx) {
                        *o += gi / xi;
                    }
                })
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |gx| axpy(*c, g, gx)),
            Op::AddScalar(x) => self.accumulate(grads, *x, |gx| axpy(1.0, g, gx)),
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(vx) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                })
            }
            Op::Sum { x, axis } => {
                let (r, c) = self.value(*x).dims2();
                self.accumulate(grads, *x, |gx| broadcast_back(g, gx, r, c, *axis, 1.0));
            }
            Op::Mean { x, axis } => {
                let (r, c) = self.value(*x).dims2();
                let n = if *axis == 0 { r } else { c };
                self.accumulate(grads, *x, |gx| {
                    broadcast_back(g, gx, r, c, Some(*axis), 1.0 / n as f64)
                });
            }
            Op::AddBias(x, b) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |gx| axpy(1.0, g, gx));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(c.max(1)) {
                        axpy(1.0, row, gb);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * c..(r + 1) * c], &mut gt[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (r, c) = node.value.dims2();
                self.accumulate(grads, *x, |gx| {
                    if *axis == 1 {
                        for i in 0..r {
                            let (ys, gs) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                            let s = dot(ys, gs);
                            for j in 0..c {
                                gx[i * c + j] += ys[j] * (gs[j] - s);
                            }
                        }
                    } else {
                        for j in 0..c {
                            let s: f64 = (0..r).map(|i| y[i * c + j] * g[i * c + j]).sum();
                            for i in 0..r {
                                gx[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (r, c) = node.value.dims2();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        let gs = &g[i * c..(i + 1) * c];
                        let total: f64 = gs.iter().sum();
                        for j in 0..c {
                            gx[i * c + j] += gs[j] - y[i * c + j].exp() * total;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let start = *start;
                self.accumulate(grads, *x, |gx| axpy(1.0, g, &mut gx[start * c..start * c + g.len()]));
            }
            Op::ShiftRows { x, offset } => {
                let (r, c) = node.value.dims2();
                self.accumulate(grads, *x, |gx| {
                    for j in 0..r {
                        let src = j as isize + offset;
                        if src >= 0 && (src as usize) < r {
                            let s = src as usize;
                            axpy(1.0, &g[j * c..(j + 1) * c], &mut gx[s * c..(s + 1) * c]);
                        }
                    }
                });
            }
            Op::Pick { x, cols } => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }
}

fn broadcast_back(g: &[f64], gx: &mut [f64], r: usize, c: usize, axis: Option<usize>, k: f64) {
    match axis {
        None => gx.iter_mut().for_each(|o| *o += k * g[0]),
        Some(0) => {
            for i in 0..r {
                axpy(k, g, &mut gx[i * c..(i + 1) * c]);
            }
        }
        _ => {
            for i in 0..r {
                gx[i * c..(i + 1) * c].iter_mut().for_each(|o| *o += k * g[i]);
            }
        }
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    xs.iter_mut().for_each(|v| *v /= total);
}
