use std::fmt;

use crate::tensor::{gemm, gemm_nt, gemm_tn, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The elementwise operation kinds exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Relu,
    Exp,
    Log,
}

impl ElemKind {
    pub fn is_binary(self) -> bool {
        matches!(self, ElemKind::Add | ElemKind::Sub | ElemKind::Mul)
    }
}

/// Inputs handed to a custom backward rule.
pub struct CustomBackward<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub upstream: &'a [f64],
}

type CustomRule = Box<dyn Fn(&CustomBackward<'_>) -> Vec<Vec<f64>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `b` has extent 1 on the last axis and is repeated along it.
    TrailingOne,
}

enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Softmax(Var),
    LogProbGather {
        x: Var,
        cols: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        rule: CustomRule,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A single-threaded record of forward operations supporting reverse-mode
/// differentiation.
///
/// Nodes are appended in execution order, so the recorded order is always
/// topological. `backward` adds each node's gradient into its accumulator;
/// gradients are only reset by [`Tape::zero_grads`] or [`Tape::truncate`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.nodes.len()).finish()
    }
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64], row: usize) -> Result<()> {
    let allowed = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(TensorError::DegenerateRow { row });
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if allowed(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

fn check_mask(op: &'static str, x: &Tensor, mask: Option<&[bool]>) -> Result<()> {
    if let Some(m) = mask {
        let d = x.last_dim();
        if m.len() != x.numel() && m.len() != d {
            return Err(TensorError::shape(
                op,
                format!("mask of {} entries for shape {:?}", m.len(), x.shape()),
            ));
        }
    }
    Ok(())
}

/// Selects the mask slice for row `r`; a mask of one row's width applies to every row.
fn mask_row(mask: Option<&[bool]>, r: usize, d: usize) -> Option<&[bool]> {
    mask.map(|m| if m.len() == d { m } else { &m[r * d..(r + 1) * d] })
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

    /// Position to later [`truncate`](Tape::truncate) back to.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded at or after `mark`. Earlier nodes, including
    /// their accumulated gradients, are kept.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Records a leaf. Its gradient is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t;
        let grad = value.grad().map(<[f64]>::to_vec);
        if requires_grad {
            value = Tensor::new(value.shape().to_vec(), value.into_data())
                .expect("shape already validated");
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that takes part in differentiation.
    pub fn param(&mut self, t: Tensor) -> Var {
        let t = if t.requires_grad() {
            t
        } else {
            t.requiring_grad()
        };
        self.leaf(t)
    }

    /// Records a leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if it has received any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// The node's value with its accumulated gradient attached.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        if node.requires_grad {
            t = t.requiring_grad();
            if let Some(g) = &node.grad {
                t.accumulate_grad(g);
            }
        }
        t
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if sa.len() == sb.len()
            && !sa.is_empty()
            && sb[sb.len() - 1] == 1
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
        {
            return Ok(Bcast::TrailingOne);
        }
        Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<f64> = match bc {
            Bcast::Same => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::TrailingOne => {
                let d = av.last_dim();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[i / d]))
                    .collect()
            }
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], make(a, b, bc)))
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

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], op)
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

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Dispatches one of the [`ElemKind`] operations.
    pub fn elementwise(&mut self, kind: ElemKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| TensorError::shape("elementwise", format!("{kind:?} needs two operands")))
        };
        match kind {
            ElemKind::Add => self.add(a, need_b()?),
            ElemKind::Sub => self.sub(a, need_b()?),
            ElemKind::Mul => self.mul(a, need_b()?),
            ElemKind::Sigmoid => Ok(self.sigmoid(a)),
            ElemKind::Relu => Ok(self.relu(a)),
            ElemKind::Exp => Ok(self.exp(a)),
            ElemKind::Log => self.log(a),
        }
    }

    /// `x[..., n] + bias[n]`, the bias repeated over every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.last_dim();
        if bv.numel() != d || bv.rank() != 1 {
            return Err(TensorError::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % d])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, &[x, bias], Op::AddBias(x, bias)))
    }

    /// Matrix product over the last two axes; leading axes are batch axes and
    /// must agree exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(TensorError::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b, batch, m, k, n }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::shape("transpose", format!("rank {}", s.len())));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch: usize = s[..r - 2].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = xd[base + i * cols + j];
                }
            }
        }
        let mut shape = s[..r - 2].to_vec();
        shape.extend([cols, rows]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::Transpose { x, batch, rows, cols }))
    }

    /// Softmax over the last axis. `mask` is either full-shape or one row wide
    /// (shared by all rows); `false` entries are excluded and come out as 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        check_mask("softmax_rows", xv, mask)?;
        let d = xv.last_dim();
        let mut out = vec![0.0; xv.numel()];
        for r in 0..xv.outer_len() {
            softmax_row(xv.row(r), mask_row(mask, r, d), &mut out[r * d..(r + 1) * d], r)?;
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, &[x], Op::Softmax(x)))
    }

    /// For each row `t` of `x[T×V]`, the log-probability of column `cols[t]`
    /// under the (optionally masked) row softmax. Output shape `[T]`.
    pub fn log_prob_gather(&mut self, x: Var, cols: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        check_mask("log_prob_gather", xv, mask)?;
        if xv.rank() != 2 || xv.shape()[0] != cols.len() {
            return Err(TensorError::shape(
                "log_prob_gather",
                format!("{:?} with {} columns", xv.shape(), cols.len()),
            ));
        }
        let d = xv.last_dim();
        let mut probs = vec![0.0; xv.numel()];
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= d {
                return Err(TensorError::Index { index: c, extent: d });
            }
            let m = mask_row(mask, r, d);
            if m.is_some_and(|m| !m[c]) {
                return Err(TensorError::Domain {
                    op: "log_prob_gather",
                    detail: format!("column {c} is masked in row {r}"),
                });
            }
            softmax_row(xv.row(r), m, &mut probs[r * d..(r + 1) * d], r)?;
            out.push(log_softmax_at(xv.row(r), m, c));
        }
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            &[x],
            Op::LogProbGather {
                x,
                cols: cols.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over non-pad positions of `-log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let v = lv.last_dim();
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (t, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(TensorError::Index { index: target, extent: v });
            }
            if target == pad_id {
                continue;
            }
            count += 1;
            softmax_row(lv.row(t), None, &mut probs[t * v..(t + 1) * v], t)?;
            total -= log_softmax_at(lv.row(t), None, target);
        }
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 || self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    xv.shape(),
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.outer_len();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::shape("embedding", format!("table {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index { index: id, extent: vocab });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.rank() != 2 || start + len > d {
            return Err(TensorError::shape(
                "slice_cols",
                format!("{:?}[.., {start}..{}]", xv.shape(), start + len),
            ));
        }
        let rows = xv.shape()[0];
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, &[x], Op::SliceCols { x, start }))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat_cols", "no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::shape("concat_cols", format!("part {s:?}, rows {rows}")));
            }
            width += s[1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(value, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Records an operation with a caller-supplied value and backward rule.
    ///
    /// `rule` returns one gradient buffer per input, each the length of that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        rule: impl Fn(&CustomBackward<'_>) -> Vec<Vec<f64>> + 'static,
    ) -> Var {
        self.push(
            value,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule: Box::new(rule),
            },
        )
    }

    /// Back-propagates from a scalar `loss`, adding `∂loss/∂node` into the
    /// gradient of every node that requires grad and is reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    match bc {
                        Bcast::Same => gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y),
                        Bcast::TrailingOne => {
                            let d = out.last_dim();
                            for (j, y) in g.iter().enumerate() {
                                gb[j / d] += sign * y;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let d = out.last_dim();
                let b_at = |j: usize| match bc {
                    Bcast::Same => bv[j],
                    Bcast::TrailingOne => bv[j / d],
                };
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for (j, y) in g.iter().enumerate() {
                        ga[j] += y * b_at(j);
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (j, y) in g.iter().enumerate() {
                        let idx = match bc {
                            Bcast::Same => j,
                            Bcast::TrailingOne => j / d,
                        };
                        gb[idx] += y * av[j];
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(p, y)| *p += y);
                }
                if wants(*b) {
                    let d = out.last_dim();
                    let gb = slot(grads, nodes, *b);
                    for (j, y) in g.iter().enumerate() {
                        gb[j % d] += y;
                    }
                }
            }
            Op::Scale(x, c) => {
                slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(p, y)| *p += c * y);
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, nodes, *x);
                for ((p, y), s) in gx.iter_mut().zip(g).zip(out.data()) {
                    *p += y * s * (1.0 - s);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let gx = slot(grads, nodes, *x);
                for ((p, y), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *p += y;
                    }
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, nodes, *x);
                for ((p, y), e) in gx.iter_mut().zip(g).zip(out.data()) {
                    *p += y * e;
                }
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                let gx = slot(grads, nodes, *x);
                for ((p, y), v) in gx.iter_mut().zip(g).zip(xv) {
                    *p += y / v;
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for i in 0..*batch {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for i in 0..*batch {
                        gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                let gx = slot(grads, nodes, *x);
                let (rows, cols) = (*rows, *cols);
                for b in 0..*batch {
                    let base = b * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[base + i * cols + j] += g[base + j * rows + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let gx = slot(grads, nodes, *x);
                for r in 0..out.outer_len() {
                    let y = out.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogProbGather { x, cols, probs } => {
                let d = val(*x).last_dim();
                let gx = slot(grads, nodes, *x);
                for (r, &c) in cols.iter().enumerate() {
                    for j in 0..d {
                        let ind = if j == c { 1.0 } else { 0.0 };
                        gx[r * d + j] += g[r] * (ind - probs[r * d + j]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                count,
            } => {
                let d = val(*logits).last_dim();
                let scale = g[0] / *count as f64;
                let gx = slot(grads, nodes, *logits);
                for (t, &target) in targets.iter().enumerate() {
                    if target == *pad_id {
                        continue;
                    }
                    for j in 0..d {
                        let ind = if j == target { 1.0 } else { 0.0 };
                        gx[t * d + j] += scale * (probs[t * d + j] - ind);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = val(*gain).data();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let n = d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += inv / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = slot(grads, nodes, *gain);
                    for (j, (y, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += y * h;
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for (j, y) in g.iter().enumerate() {
                        gb[j % d] += y;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).last_dim();
                let gt = slot(grads, nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let d = val(*x).last_dim();
                let w = out.last_dim();
                let gx = slot(grads, nodes, *x);
                for r in 0..out.outer_len() {
                    for j in 0..w {
                        gx[r * d + start + j] += g[r * w + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let w = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pw = val(p).last_dim();
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for r in 0..out.outer_len() {
                            for j in 0..pw {
                                gp[r * pw + j] += g[r * w + offset + j];
                            }
                        }
                    }
                    offset += pw;
                }
            }
            Op::Reshape(x) => {
                slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(p, y)| *p += y);
            }
            Op::Sum(x) => {
                slot(grads, nodes, *x).iter_mut().for_each(|p| *p += g[0]);
            }
            Op::Custom { inputs, rule } => {
                let ctx = CustomBackward {
                    inputs: inputs.iter().map(|&v| val(v)).collect(),
                    output: out,
                    upstream: g,
                };
                let parts = rule(&ctx);
                for (&v, part) in inputs.iter().zip(parts) {
                    if wants(v) {
                        slot(grads, nodes, v).iter_mut().zip(&part).for_each(|(p, y)| *p += y);
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// `log softmax(x)[c]` over the unmasked entries.
fn log_softmax_at(x: &[f64], mask: Option<&[bool]>, c: usize) -> f64 {
    let allowed = |j: usize| mask.map_or(true, |m| m[j]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    x[c] - max - sum.ln()
}
