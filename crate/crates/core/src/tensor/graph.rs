use super::gemm::{gemm, Operand};
use super::{axis_split, Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order. A graph belongs to one thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub(crate) fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, make(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum)
    }

    /// Adds a `[C]` row vector to every row of a `[.., C]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let c = *tx.shape.last().unwrap_or(&0);
        if tr.shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: tx.shape.clone(),
                rhs: tr.shape.clone(),
            });
        }
        let mut data = tx.data.clone();
        if c > 0 {
            for chunk in data.chunks_mut(c) {
                chunk.iter_mut().zip(&tr.data).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    /// `x + c` for a scalar constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = matrix_dims("matmul", ta)?;
        let (br, bc) = matrix_dims("matmul", tb)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        let bop = if trans_b {
            Operand::transposed(&tb.data, bc)
        } else {
            Operand::plain(&tb.data, bc)
        };
        gemm(m, k, n, Operand::plain(&ta.data, k), bop, &mut out, 0.0);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (outer, n, inner) = axis_split(&t.shape, axis)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let mut out = vec![0.0; t.data.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| t.data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (t.data[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[idx(i)] /= z;
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis (epsilon `1e-5`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let c = *t.shape.last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.nodes[p.0].value.shape != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape.clone(),
                    rhs: self.nodes[p.0].value.shape.clone(),
                });
            }
        }
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let rows = if c == 0 { 0 } else { t.data.len() / c };
        let mut xhat = vec![0.0; t.data.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.data.len()];
        for r in 0..rows {
            let row = &t.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let xh = (row[i] - mean) * rs;
                xhat[r * c + i] = xh;
                out[r * c + i] = xh * g[i] + b[i];
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = matrix_dims("transpose", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].value.shape.clone();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = &self.nodes[v.0].value.shape;
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, d)| i == axis || *d == base[i]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let n = t.shape[axis];
                out.extend_from_slice(&t.data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (outer, n, inner) = axis_split(&t.shape, axis)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                size: n,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice { x, axis, start }, rg))
    }

    /// Alias of [`Graph::gather_rows`] under its usual name.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    /// Rows of a `[V, D]` table selected by `indices`. Repeated indices
    /// accumulate gradient.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let (v, d) = matrix_dims("gather_rows", t)?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    size: v,
                });
            }
            out.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), d],
                data: out,
            },
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted softmax cross entropy summed over rows:
    /// `sum_r weights[r] * (logsumexp(z_r) - z_r[targets[r]])`.
    ///
    /// A 1-D `logits` tensor is treated as a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let (rows, c) = match t.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: s.to_vec(),
                    rhs: vec![targets.len(), 0],
                })
            }
        };
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("cross_entropy"));
        }
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            let target = targets[r];
            if target >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    size: c,
                });
            }
            let z = &t.data[r * c..(r + 1) * c];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for i in 0..c {
                probs[r * c + i] = (z[i] - lse).exp();
            }
            loss += weights[r] * (lse - z[target]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights and
    /// `[O]` bias, symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let ti = &self.nodes[input.0].value;
        let tw = &self.nodes[weight.0].value;
        let tb = &self.nodes[bias.0].value;
        let (in_c, in_h, in_w) = match ti.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: s.to_vec(),
                    rhs: tw.shape.clone(),
                })
            }
        };
        let (out_c, k) = match tw.shape.as_slice() {
            [o, c, k1, k2] if *c == in_c && k1 == k2 => (*o, *k1),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: ti.shape.clone(),
                    rhs: s.to_vec(),
                })
            }
        };
        if tb.shape != [out_c] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tw.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        if stride == 0 || in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(TensorError::Config(format!(
                "conv2d: input {in_h}x{in_w} too small for kernel {k} (stride {stride}, pad {pad})"
            )));
        }
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            k,
            stride,
            pad,
        };
        let cols = im2col(&ti.data, geom);
        let p = out_h * out_w;
        let ck = in_c * k * k;
        let mut out = vec![0.0; out_c * p];
        gemm(
            out_c,
            ck,
            p,
            Operand::plain(&tw.data, ck),
            Operand::plain(&cols, p),
            &mut out,
            0.0,
        );
        for o in 0..out_c {
            let b = tb.data[o];
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let saved = if rg { cols } else { Vec::new() };
        Ok(self.push(
            Tensor {
                shape: vec![out_c, out_h, out_w],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: saved,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        let acc = accumulate(grads, v, len(v));
                        acc.iter_mut().zip(g).for_each(|(x, gi)| *x += sign * gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let acc = accumulate(grads, v, len(v));
                        acc.iter_mut().zip(g).for_each(|(x, gi)| *x += sign * gi);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                if wants(*a) {
                    let acc = accumulate(grads, *a, va.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] * vb[k];
                    }
                }
                if wants(*b) {
                    let acc = accumulate(grads, *b, vb.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                if wants(*a) {
                    let acc = accumulate(grads, *a, va.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] / vb[k];
                    }
                }
                if wants(*b) {
                    let acc = accumulate(grads, *b, vb.len());
                    for k in 0..g.len() {
                        acc[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (&val(*a).data, &val(*b).data);
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                if wants(*a) {
                    let acc = accumulate(grads, *a, va.len());
                    for k in 0..g.len() {
                        if pick_a[k] {
                            acc[k] += g[k];
                        }
                    }
                }
                if wants(*b) {
                    let acc = accumulate(grads, *b, vb.len());
                    for k in 0..g.len() {
                        if !pick_a[k] {
                            acc[k] += g[k];
                        }
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    let acc = accumulate(grads, *x, len(*x));
                    acc.iter_mut().zip(g).for_each(|(v, gi)| *v += gi);
                }
                if wants(*row) {
                    let c = len(*row);
                    let acc = accumulate(grads, *row, c);
                    if c > 0 {
                        for chunk in g.chunks(c) {
                            acc.iter_mut().zip(chunk).for_each(|(v, gi)| *v += gi);
                        }
                    }
                }
            }
            Op::Scale(x, k) => {
                if wants(*x) {
                    let acc = accumulate(grads, *x, len(*x));
                    acc.iter_mut().zip(g).for_each(|(v, gi)| *v += k * gi);
                }
            }
            Op::Offset(x) => {
                if wants(*x) {
                    let acc = accumulate(grads, *x, len(*x));
                    acc.iter_mut().zip(g).for_each(|(v, gi)| *v += gi);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = &val(*x).data;
                    let acc = accumulate(grads, *x, xv.len());
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            acc[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) | Op::Exp(x) => {
                if wants(*x) {
                    let y = &node.value.data;
                    let is_sig = matches!(node.op, Op::Sigmoid(_));
                    let acc = accumulate(grads, *x, y.len());
                    for k in 0..g.len() {
                        let d = if is_sig { y[k] * (1.0 - y[k]) } else { y[k] };
                        acc[k] += g[k] * d;
                    }
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xv = &val(*x).data;
                    let acc = accumulate(grads, *x, xv.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] / xv[k];
                    }
                }
            }
            Op::Abs(x) => {
                if wants(*x) {
                    let xv = &val(*x).data;
                    let acc = accumulate(grads, *x, xv.len());
                    for k in 0..g.len() {
                        let s = if xv[k] > 0.0 {
                            1.0
                        } else if xv[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        acc[k] += g[k] * s;
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let acc = accumulate(grads, *x, len(*x));
                    acc.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let (br, bc) = (tb.shape[0], tb.shape[1]);
                let n = if *trans_b { br } else { bc };
                if wants(*a) {
                    // dA[m,k] = dC[m,n] * B^T (or * B when B is stored transposed)
                    let bop = if *trans_b {
                        Operand::plain(&tb.data, bc)
                    } else {
                        Operand::transposed(&tb.data, bc)
                    };
                    let acc = accumulate(grads, *a, m * k);
                    gemm(m, n, k, Operand::plain(g, n), bop, acc, 1.0);
                }
                if wants(*b) {
                    let acc = accumulate(grads, *b, br * bc);
                    if *trans_b {
                        // dB[n,k] = dC^T * A
                        gemm(
                            n,
                            m,
                            k,
                            Operand::transposed(g, n),
                            Operand::plain(&ta.data, k),
                            acc,
                            1.0,
                        );
                    } else {
                        // dB[k,n] = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            Operand::transposed(&ta.data, k),
                            Operand::plain(g, n),
                            acc,
                            1.0,
                        );
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = &node.value;
                    let (outer, n, inner) = axis_split(&y.shape, *axis).expect("validated in forward");
                    let acc = accumulate(grads, *x, y.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y.data[idx(i)]).sum();
                            for i in 0..n {
                                acc[idx(i)] += y.data[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = len(*gain);
                let rows = rstd.len();
                let gv = &val(*gain).data;
                if wants(*gain) {
                    let acc = accumulate(grads, *gain, c);
                    for r in 0..rows {
                        for i in 0..c {
                            acc[i] += g[r * c + i] * xhat[r * c + i];
                        }
                    }
                }
                if wants(*bias) {
                    let acc = accumulate(grads, *bias, c);
                    for r in 0..rows {
                        for i in 0..c {
                            acc[i] += g[r * c + i];
                        }
                    }
                }
                if wants(*x) {
                    let acc = accumulate(grads, *x, rows * c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in 0..c {
                            dxhat[i] = g[r * c + i] * gv[i];
                            mean_d += dxhat[i];
                            mean_dx += dxhat[i] * xhat[r * c + i];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for i in 0..c {
                            acc[r * c + i] += rstd[r] * (dxhat[i] - mean_d - xhat[r * c + i] * mean_dx);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                    let acc = accumulate(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            acc[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let acc = accumulate(grads, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(v, gi)| *v += gi);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let (outer, total, inner) = axis_split(shape, *axis).expect("validated in forward");
                let mut offset = 0;
                for v in inputs {
                    let n = val(*v).shape[*axis];
                    if wants(*v) {
                        let acc = accumulate(grads, *v, outer * n * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for t in 0..n * inner {
                                acc[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let xs = &val(*x).shape;
                    let (outer, n, inner) = axis_split(xs, *axis).expect("validated in forward");
                    let l = node.value.shape[*axis];
                    let acc = accumulate(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * l * inner;
                        for t in 0..l * inner {
                            acc[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                if wants(*table) {
                    let d = val(*table).shape[1];
                    let acc = accumulate(grads, *table, len(*table));
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            acc[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let rows = targets.len();
                    let c = if rows == 0 { 0 } else { probs.len() / rows };
                    let acc = accumulate(grads, *logits, probs.len());
                    for r in 0..rows {
                        let w = weights[r] * g[0];
                        for i in 0..c {
                            let onehot = if i == targets[r] { 1.0 } else { 0.0 };
                            acc[r * c + i] += w * (probs[r * c + i] - onehot);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let p = geom.out_h * geom.out_w;
                let ck = geom.in_c * geom.k * geom.k;
                if wants(*bias) {
                    let acc = accumulate(grads, *bias, geom.out_c);
                    for o in 0..geom.out_c {
                        acc[o] += g[o * p..(o + 1) * p].iter().sum::<f64>();
                    }
                }
                if wants(*weight) {
                    let acc = accumulate(grads, *weight, geom.out_c * ck);
                    gemm(
                        geom.out_c,
                        p,
                        ck,
                        Operand::plain(g, p),
                        Operand::transposed(cols, p),
                        acc,
                        1.0,
                    );
                }
                if wants(*input) {
                    let w = &val(*weight).data;
                    let mut dcols = vec![0.0; ck * p];
                    gemm(
                        ck,
                        geom.out_c,
                        p,
                        Operand::transposed(w, ck),
                        Operand::plain(g, p),
                        &mut dcols,
                        0.0,
                    );
                    let acc = accumulate(grads, *input, geom.in_c * geom.in_h * geom.in_w);
                    col2im(&dcols, *geom, acc);
                }
            }
        }
    }
}

fn im2col(input: &[f64], g: ConvGeom) -> Vec<f64> {
    let p = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.in_c * g.k * g.k * p];
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = input[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: ConvGeom, out: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            out[dst_row + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
