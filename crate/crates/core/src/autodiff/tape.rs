use super::gemm::{gemm, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Normalisation epsilon shared by LayerNorm and BatchNorm.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode BatchNorm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    L1(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    GroupMeanRows {
        x: Var,
        group: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Mse(a, b)
            | Op::L1(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L2Normalize { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GroupMeanRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchNorm { x, affine, .. } | Op::BatchNormEval { x, affine, .. } => {
                let mut v = vec![*x];
                if let Some((g, b)) = affine {
                    v.extend([*g, *b]);
                }
                v
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when this node is a trainable leaf or depends on one.
    needs_grad: bool,
    /// Only meaningful for leaves.
    requires_grad: bool,
}

/// Records primitive applications in evaluation order for reverse-mode
/// differentiation. Every input of a record precedes it, so a single
/// reverse sweep visits each record exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves that were created with `requires_grad`.
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

fn gelu_tanh(x: f64) -> (f64, f64) {
    // tanh approximation; returns (value, derivative)
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * A * x * x);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copies a value into a fresh constant leaf; no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.node(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.node(v);
        if t.shape().len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a).shape(), self.node(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `a @ b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] @ [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(self.node(a).data(), m, k),
            View::dense(self.node(b).data(), k, n),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a @ b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_t", a)?;
        let (n, k2) = self.dims2("matmul_t", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("[{m}, {k}] @ [{n}, {k2}]^T"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(self.node(a).data(), m, k),
            View::dense(self.node(b).data(), n, k).t(),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b)))
    }

    fn zip_map(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.node(a), self.node(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[1, cols]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.node(a).cols();
        if self.node(row).numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!(
                    "row {:?} vs input {:?}",
                    self.node(row).shape(),
                    self.node(a).shape()
                ),
            ));
        }
        let r = self.node(row).data().to_vec();
        let mut out = self.node(a).clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            add_into(chunk, &r);
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let out = self.node(a).map(|v| v * c);
        Ok(self.push(out, Op::Scale(a, c)))
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Row-wise LayerNorm with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.node(x);
        let cols = t.cols();
        if self.node(gamma).numel() != cols || self.node(beta).numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("affine size vs {cols} features"),
            ));
        }
        let rows = t.rows();
        let g = self.node(gamma).data();
        let bb = self.node(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + bb[c];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn check_affine(
        &self,
        op: &'static str,
        cols: usize,
        affine: Option<(Var, Var)>,
    ) -> Result<()> {
        if let Some((g, b)) = affine {
            if self.node(g).numel() != cols || self.node(b).numel() != cols {
                return Err(Error::shape(op, format!("affine size vs {cols} features")));
            }
        }
        Ok(())
    }

    /// Training-mode BatchNorm: normalises every column with the biased
    /// batch statistics. `affine = None` gives the non-affine variant.
    pub fn batch_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<(Var, BatchStats)> {
        let t = self.node(x);
        let (rows, cols) = (t.rows(), t.cols());
        self.check_affine("batch_norm", cols, affine)?;
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            add_into(&mut mean, t.row(r));
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (c, v) in t.row(r).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (out, xhat) = self.normalize_cols(x, &mean, &inv_std, affine)?;
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                affine,
                xhat,
                inv_std,
            },
        );
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Evaluation-mode BatchNorm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        mean: &[f64],
        var: &[f64],
        affine: Option<(Var, Var)>,
    ) -> Result<Var> {
        let cols = self.node(x).cols();
        if mean.len() != cols || var.len() != cols {
            return Err(Error::shape("batch_norm_eval", "running statistics size"));
        }
        self.check_affine("batch_norm_eval", cols, affine)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (out, xhat) = self.normalize_cols(x, mean, &inv_std, affine)?;
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                affine,
                xhat,
                inv_std,
            },
        ))
    }

    fn normalize_cols(
        &self,
        x: Var,
        mean: &[f64],
        inv_std: &[f64],
        affine: Option<(Var, Var)>,
    ) -> Result<(Tensor, Vec<f64>)> {
        let t = self.node(x);
        let cols = t.cols();
        let mut xhat = vec![0.0; t.numel()];
        for (i, v) in t.data().iter().enumerate() {
            let c = i % cols;
            xhat[i] = (v - mean[c]) * inv_std[c];
        }
        let out = match affine {
            None => xhat.clone(),
            Some((g, b)) => {
                let (g, b) = (self.node(g).data(), self.node(b).data());
                xhat.iter()
                    .enumerate()
                    .map(|(i, xh)| xh * g[i % cols] + b[i % cols])
                    .collect()
            }
        };
        Ok((Tensor::new(t.shape().to_vec(), out)?, xhat))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.node(x).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// GELU (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x).map(|v| gelu_tanh(v).0);
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x).map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu(x)))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let mut out = self.node(x).clone();
        let cols = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`. `q`, `k`, `v` are `(batch * seq) x dim`
    /// with heads laid out as contiguous column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, dim) = self.dims2("attention", q)?;
        if rows != batch * seq || heads == 0 || dim % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("[{rows}, {dim}] with batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.node(q).data(),
            self.node(k).data(),
            self.node(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * dh;
                let sub = |data| View {
                    data,
                    offset: off,
                    rows: seq,
                    cols: dh,
                    rs: dim,
                    cs: 1,
                };
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    scale,
                    sub(qd),
                    sub(kd).t(),
                    0.0,
                    ViewMut::dense(p, seq, seq),
                );
                for row in p.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                gemm(
                    1.0,
                    View::dense(p, seq, seq),
                    sub(vd),
                    0.0,
                    ViewMut {
                        data: &mut out,
                        offset: off,
                        rows: seq,
                        cols: dh,
                        rs: dim,
                        cs: 1,
                    },
                );
            }
        }
        let out = Tensor::matrix(rows, dim, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits` (rows = samples) against
    /// integer class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {t} out of {c} classes"),
            ));
        }
        let mut probs = self.node(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.node(a), self.node(b));
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / ta.numel() as f64);
        Ok(self.push(out, Op::Mse(a, b)))
    }

    /// Mean absolute error over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let (ta, tb) = (self.node(a), self.node(b));
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let out = Tensor::scalar(s / ta.numel() as f64);
        Ok(self.push(out, Op::L1(a, b)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.node(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.node(*p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} vs {cols} columns", t.cols()),
                ));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Selects rows by index; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.node(x);
        let (rows, cols) = (t.rows(), t.cols());
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        if let Some(i) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {i} out of {rows}"),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(index.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of {cols}", start + len),
            ));
        }
        let t = self.node(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.node(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("group_mean_rows", x)?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(
                "group_mean_rows",
                format!("{rows} rows in groups of {group}"),
            ));
        }
        let t = self.node(x);
        let mut data = vec![0.0; rows / group * cols];
        for r in 0..rows {
            add_into(&mut data[r / group * cols..][..cols], t.row(r));
        }
        data.iter_mut().for_each(|v| *v /= group as f64);
        let out = Tensor::matrix(rows / group, cols, data)?;
        Ok(self.push(out, Op::GroupMeanRows { x, group }))
    }

    /// Reverse sweep from `output` seeded with `seed`. Returns gradients for
    /// every leaf created with `requires_grad`; unreached leaves get zeros.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid(
                "output variable does not belong to this tape",
            ));
        }
        if seed.shape() != self.node(output).shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    self.node(output).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| {
                n.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; n.value.numel()]);
                    Tensor::new(n.value.shape().to_vec(), data).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Lazily materialises an input's gradient buffer.
        fn buf(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.node(*a).shape()[0], self.node(*a).shape()[1]);
                let n = self.node(*b).shape()[1];
                let gv = View::dense(g, m, n);
                if self.wants(*a) {
                    let bv = View::dense(self.node(*b).data(), k, n);
                    let ga = buf(grads, *a, m * k);
                    gemm(1.0, gv, bv.t(), 1.0, ViewMut::dense(ga, m, k));
                }
                if self.wants(*b) {
                    let av = View::dense(self.node(*a).data(), m, k);
                    let gb = buf(grads, *b, k * n);
                    gemm(1.0, av.t(), gv, 1.0, ViewMut::dense(gb, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a @ b^T, a: m x k, b: n x k
                let (m, k) = (self.node(*a).shape()[0], self.node(*a).shape()[1]);
                let n = self.node(*b).shape()[0];
                let gv = View::dense(g, m, n);
                if self.wants(*a) {
                    let bv = View::dense(self.node(*b).data(), n, k);
                    let ga = buf(grads, *a, m * k);
                    gemm(1.0, gv, bv, 1.0, ViewMut::dense(ga, m, k));
                }
                if self.wants(*b) {
                    let av = View::dense(self.node(*a).data(), m, k);
                    let gb = buf(grads, *b, n * k);
                    gemm(1.0, gv.t(), av, 1.0, ViewMut::dense(gb, n, k));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(buf(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(buf(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    buf(grads, *b, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.node(*a).data(), self.node(*b).data());
                if self.wants(*a) {
                    let ga = buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if self.wants(*b) {
                    let gb = buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(buf(grads, *a, g.len()), g);
                }
                if self.wants(*row) {
                    let cols = out.cols();
                    let gr = buf(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    buf(grads, *a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += c * s);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = out.cols();
                let gam = self.node(*gamma).data();
                if self.wants(*gamma) {
                    let gg = buf(grads, *gamma, cols);
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % cols] += gi * xhat[i];
                    }
                }
                if self.wants(*beta) {
                    let gb = buf(grads, *beta, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gb, chunk);
                    }
                }
                if self.wants(*x) {
                    let gx = buf(grads, *x, g.len());
                    let nf = cols as f64;
                    let mut dxh = vec![0.0; cols];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..][..cols];
                        let xr = &xhat[r * cols..][..cols];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..cols {
                            dxh[c] = gr[c] * gam[c];
                            s1 += dxh[c];
                            s2 += dxh[c] * xr[c];
                        }
                        let dst = &mut gx[r * cols..][..cols];
                        for c in 0..cols {
                            dst[c] += is / nf * (nf * dxh[c] - s1 - xr[c] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                affine,
                xhat,
                inv_std,
            }
            | Op::BatchNormEval {
                x,
                affine,
                xhat,
                inv_std,
            } => {
                let cols = out.cols();
                let rows = out.rows();
                if let Some((gamma, beta)) = affine {
                    if self.wants(*gamma) {
                        let gg = buf(grads, *gamma, cols);
                        for (i, gi) in g.iter().enumerate() {
                            gg[i % cols] += gi * xhat[i];
                        }
                    }
                    if self.wants(*beta) {
                        let gb = buf(grads, *beta, cols);
                        for chunk in g.chunks(cols) {
                            add_into(gb, chunk);
                        }
                    }
                }
                if self.wants(*x) {
                    let gam: Option<&[f64]> = affine.map(|(gm, _)| self.node(gm).data());
                    let dxh: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * gam.map_or(1.0, |gm| gm[i % cols]))
                        .collect();
                    let gx = buf(grads, *x, g.len());
                    if matches!(node.op, Op::BatchNormEval { .. }) {
                        for i in 0..g.len() {
                            gx[i] += dxh[i] * inv_std[i % cols];
                        }
                    } else {
                        let nf = rows as f64;
                        let mut s1 = vec![0.0; cols];
                        let mut s2 = vec![0.0; cols];
                        for i in 0..g.len() {
                            s1[i % cols] += dxh[i];
                            s2[i % cols] += dxh[i] * xhat[i];
                        }
                        for i in 0..g.len() {
                            let c = i % cols;
                            gx[i] += inv_std[c] / nf * (nf * dxh[i] - s1[c] - xhat[i] * s2[c]);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let cols = out.cols();
                    let gx = buf(grads, *x, g.len());
                    for ((yr, gr), dst) in out
                        .data()
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for c in 0..cols {
                            dst[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.node(*x).data();
                    let gx = buf(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_tanh(xv[i]).1;
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.node(*x).data();
                    let gx = buf(grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.wants(*x) {
                    let cols = out.cols();
                    let gx = buf(grads, *x, g.len());
                    for (r, n) in norms.iter().enumerate() {
                        let y = &out.data()[r * cols..][..cols];
                        let gr = &g[r * cols..][..cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dst = &mut gx[r * cols..][..cols];
                        for c in 0..cols {
                            dst[c] += (gr[c] - y[c] * dot) / n;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), (*batch, *seq, *heads), probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.node(*logits).cols();
                    let n = targets.len() as f64;
                    let s = g[0] / n;
                    let gl = buf(grads, *logits, probs.len());
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if targets[i / c] == i % c { 1.0 } else { 0.0 };
                        gl[i] += s * (p - onehot);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.node(*a).data(), self.node(*b).data());
                let s = 2.0 * g[0] / va.len() as f64;
                if self.wants(*a) {
                    let ga = buf(grads, *a, va.len());
                    for i in 0..va.len() {
                        ga[i] += s * (va[i] - vb[i]);
                    }
                }
                if self.wants(*b) {
                    let gb = buf(grads, *b, va.len());
                    for i in 0..va.len() {
                        gb[i] -= s * (va[i] - vb[i]);
                    }
                }
            }
            Op::L1(a, b) => {
                let (va, vb) = (self.node(*a).data(), self.node(*b).data());
                let s = g[0] / va.len() as f64;
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if self.wants(*a) {
                    let ga = buf(grads, *a, va.len());
                    for i in 0..va.len() {
                        ga[i] += s * sign(va[i] - vb[i]);
                    }
                }
                if self.wants(*b) {
                    let gb = buf(grads, *b, va.len());
                    for i in 0..va.len() {
                        gb[i] -= s * sign(va[i] - vb[i]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = numel(*p);
                    if self.wants(*p) {
                        add_into(buf(grads, *p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let cols = out.cols();
                    let gx = buf(grads, *x, numel(*x));
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * cols..][..cols], &g[r * cols..][..cols]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let len = out.cols();
                    let cols = self.node(*x).cols();
                    let gx = buf(grads, *x, numel(*x));
                    for (r, chunk) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * cols + start..][..len], chunk);
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    buf(grads, *x, numel(*x))
                        .iter_mut()
                        .for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = numel(*x);
                    let s = g[0] / n as f64;
                    buf(grads, *x, n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::GroupMeanRows { x, group } => {
                if self.wants(*x) {
                    let cols = out.cols();
                    let inv = 1.0 / *group as f64;
                    let gx = buf(grads, *x, numel(*x));
                    for (r, dst) in gx.chunks_mut(cols).enumerate() {
                        let src = &g[r / group * cols..][..cols];
                        for c in 0..cols {
                            dst[c] += src[c] * inv;
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let dim = self.node(q).cols();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total = batch * seq * dim;
        let (qd, kd, vd) = (
            self.node(q).data(),
            self.node(k).data(),
            self.node(v).data(),
        );
        // Take the buffers out so the three can be borrowed mutably at once.
        let mut take = |var: Var| {
            self.wants(var)
                .then(|| grads[var.0].take().unwrap_or_else(|| vec![0.0; total]))
        };
        let (mut gq, mut gk, mut gv) = (take(q), take(k), take(v));
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * dh;
                let sub = |data| View {
                    data,
                    offset: off,
                    rows: seq,
                    cols: dh,
                    rs: dim,
                    cs: 1,
                };
                let sub_mut = |data| ViewMut {
                    data,
                    offset: off,
                    rows: seq,
                    cols: dh,
                    rs: dim,
                    cs: 1,
                };
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                let pv = View::dense(p, seq, seq);
                if let Some(gv) = gv.as_mut() {
                    gemm(1.0, pv.t(), sub(g), 1.0, sub_mut(gv));
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                gemm(
                    1.0,
                    sub(g),
                    sub(vd).t(),
                    0.0,
                    ViewMut::dense(&mut dp, seq, seq),
                );
                for (prow, drow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..seq {
                        drow[c] = prow[c] * (drow[c] - dot) * scale;
                    }
                }
                let ds = View::dense(&dp, seq, seq);
                if let Some(gq) = gq.as_mut() {
                    gemm(1.0, ds, sub(kd), 1.0, sub_mut(gq));
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(1.0, ds.t(), sub(qd), 1.0, sub_mut(gk));
                }
            }
        }
        // q, k and v may alias one another (self-attention on one tensor).
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(b) = buf {
                match grads[var.0].as_mut() {
                    Some(existing) => add_into(existing, &b),
                    None => grads[var.0] = Some(b),
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
