//! Reverse-mode tape. Every op appends a node whose inputs already exist on the
//! tape, so node order is a topological order and the reverse sweep is a single
//! backwards pass over the node list.

use super::kernels::{self, gemm, MatRef};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    MulCol {
        a: Var,
        col: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    MulConst {
        a: Var,
        mask: Vec<f64>,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    RowEntropy {
        p: Var,
    },
    Mean {
        a: Var,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepState {
    Recording,
    Swept,
}

/// Records a forward computation and replays it backwards exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    state: SweepState,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: SweepState::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(self.state == SweepState::Recording);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_recording(&self) -> Result<(), NumericsError> {
        match self.state {
            SweepState::Recording => Ok(()),
            SweepState::Swept => Err(NumericsError::AlreadySwept),
        }
    }

    /// Trainable leaf: a copy of `t` whose gradient is collected by the sweep.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the swept loss with respect to `v`; `None` before the sweep
    /// or when `v` does not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = kernels::matmul_new(MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (n, k2) = tb.dims2();
        if k != k2 {
            return Err(mismatch("matmul_bt", ta, tb));
        }
        let out = kernels::matmul_new(MatRef::new(ta.data(), m, k), MatRef::t(tb.data(), k, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
            rg,
        ))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &'static str) -> Result<(), NumericsError> {
        self.check_recording()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.dims2() != tb.dims2() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims2();
        if tr.len() != n {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow { a, row }, rg))
    }

    /// Scales row `i` of an `m × n` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = ta.dims2();
        if tc.len() != m {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let c = tc.data()[i];
            data[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= c);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MulCol { a, col }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale { a, s }, rg))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(NumericsError::LengthMismatch {
                shape: ta.shape().to_vec(),
                len: mask.len(),
            });
        }
        let out = Tensor::new(
            ta.shape(),
            ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst { a, mask }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, op, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, kernels::gelu, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid { a })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut data = ta.data().to_vec();
        for i in 0..m {
            kernels::softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(ta.shape(), data)?, Op::Softmax { a }, rg))
    }

    /// Row-wise layer normalization with affine `gain`/`bias` of row length.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if n < 2 {
            return Err(NumericsError::DegenerateAxis {
                op: "layer_norm",
                len: n,
            });
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        let mut x_hat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            inv_std[i] =
                kernels::layer_norm_row(row, &ones, &zeros, eps, &mut x_hat[i * n..(i + 1) * n]);
            for j in 0..n {
                out[i * n + j] = x_hat[i * n + j] * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(tx.shape(), out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` (`vocab × d`) by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let tt = self.value(table);
        let (v, d) = tt.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: v });
        }
        if ids.is_empty() {
            return Err(NumericsError::EmptyAxis { op: "embedding" });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, na) = ta.dims2();
        let (m2, nb) = tb.dims2();
        if m != m2 {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(ta.row_slice(i));
            data.extend_from_slice(tb.row_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[m, na + nb], data)?,
            Op::ConcatCols { a, b },
            rg,
        ))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if len == 0 || start + len > n {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.row_slice(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[m, len], data)?,
            Op::SliceCols { a, start },
            rg,
        ))
    }

    /// Multi-head causal self-attention over a packed `T × 3d` `[q | k | v]` matrix.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let t = self.value(qkv);
        let (len, three_d) = t.dims2();
        if heads == 0 || three_d % (3 * heads) != 0 {
            return Err(NumericsError::InvalidShape(t.shape().to_vec()));
        }
        let d = three_d / 3;
        let (out, probs) = attention_forward(t.data(), len, d, heads);
        let rg = self.rg(qkv);
        Ok(self.push(
            Tensor::new(&[len, d], out)?,
            Op::CausalAttention { qkv, heads, probs },
            rg,
        ))
    }

    /// Per-row Shannon entropy (nats) of a row-stochastic matrix, as `m × 1`.
    pub fn row_entropy(&mut self, p: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let tp = self.value(p);
        let (m, n) = tp.dims2();
        let data = (0..m)
            .map(|i| {
                -tp.data()[i * n..(i + 1) * n]
                    .iter()
                    .filter(|&&x| x > 0.0)
                    .map(|&x| x * x.ln())
                    .sum::<f64>()
            })
            .collect();
        let rg = self.rg(p);
        Ok(self.push(Tensor::new(&[m, 1], data)?, Op::RowEntropy { p }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let ta = self.value(a);
        let m = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    /// Mean token cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NumericsError> {
        self.check_recording()?;
        let tl = self.value(logits);
        let (m, v) = tl.dims2();
        if targets.len() != m {
            return Err(NumericsError::LengthMismatch {
                shape: tl.shape().to_vec(),
                len: targets.len(),
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NumericsError::EmptyAxis {
                op: "cross_entropy",
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            kernels::softmax_in_place(row);
            if let Some(t) = *target {
                if t >= v {
                    return Err(NumericsError::IndexOutOfRange { index: t, len: v });
                }
                // log-sum-exp form keeps the loss finite when p underflows.
                let zrow = &tl.data()[i * v..(i + 1) * v];
                let max = zrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + zrow.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - zrow[t];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.state == SweepState::Swept {
            return Err(NumericsError::AlreadySwept);
        }
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::NoForwardPass);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.state = SweepState::Swept;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2();
                let n = node.value.cols();
                let gm = MatRef::new(g, m, n);
                if rg(*a) {
                    let da = accumulate(grads, *a, m * k);
                    let bview = if *b_transposed {
                        MatRef::new(tb.data(), n, k)
                    } else {
                        MatRef::t(tb.data(), n, k)
                    };
                    gemm(1.0, gm, bview, 1.0, da);
                }
                if rg(*b) {
                    let db = accumulate(grads, *b, k * n);
                    if *b_transposed {
                        // d(b: n×k) = gᵀ · a
                        gemm(
                            1.0,
                            MatRef::t(g, n, m),
                            MatRef::new(ta.data(), m, k),
                            1.0,
                            db,
                        );
                    } else {
                        gemm(1.0, MatRef::t(ta.data(), k, m), gm, 1.0, db);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        let d = accumulate(grads, v, g.len());
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let tb = val(*b).data();
                    let d = accumulate(grads, *a, g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * tb[j];
                    }
                }
                if rg(*b) {
                    let ta = val(*a).data();
                    let d = accumulate(grads, *b, g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * ta[j];
                    }
                }
            }
            Op::AddRow { a, row } => {
                let n = val(*row).len();
                if rg(*a) {
                    let d = accumulate(grads, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*row) {
                    let d = accumulate(grads, *row, n);
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MulCol { a, col } => {
                let (ta, tc) = (val(*a), val(*col));
                let (m, n) = ta.dims2();
                if rg(*a) {
                    let d = accumulate(grads, *a, m * n);
                    for i in 0..m {
                        let c = tc.data()[i];
                        for j in 0..n {
                            d[i * n + j] += g[i * n + j] * c;
                        }
                    }
                }
                if rg(*col) {
                    let d = accumulate(grads, *col, m);
                    for i in 0..m {
                        d[i] += kernels::dot(&g[i * n..(i + 1) * n], ta.row_slice(i));
                    }
                }
            }
            Op::Scale { a, s } => {
                let d = accumulate(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::MulConst { a, mask } => {
                let d = accumulate(grads, *a, g.len());
                for j in 0..g.len() {
                    d[j] += g[j] * mask[j];
                }
            }
            Op::Relu { a } => {
                let x = val(*a).data();
                let d = accumulate(grads, *a, g.len());
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        d[j] += g[j];
                    }
                }
            }
            Op::Gelu { a } => {
                let x = val(*a).data();
                let d = accumulate(grads, *a, g.len());
                for j in 0..g.len() {
                    d[j] += g[j] * kernels::gelu_grad(x[j]);
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let d = accumulate(grads, *a, g.len());
                for j in 0..g.len() {
                    d[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let (m, n) = node.value.dims2();
                let d = accumulate(grads, *a, m * n);
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let s = kernels::dot(yr, gr);
                    for j in 0..n {
                        d[i * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let (m, n) = node.value.dims2();
                let gain_v = val(*gain).data();
                if rg(*gain) {
                    let d = accumulate(grads, *gain, n);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * x_hat[i * n + j];
                        }
                    }
                }
                if rg(*bias) {
                    let d = accumulate(grads, *bias, n);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                }
                if rg(*x) {
                    let d = accumulate(grads, *x, m * n);
                    let nf = n as f64;
                    for i in 0..m {
                        let xh = &x_hat[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * gain_v[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= nf;
                        mean_dxh_xh /= nf;
                        for j in 0..n {
                            let dxh = gr[j] * gain_v[j];
                            d[i * n + j] += inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, dm) = val(*table).dims2();
                let d = accumulate(grads, *table, v * dm);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..dm {
                        d[id * dm + j] += g[i * dm + j];
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, na) = val(*a).dims2();
                let nb = val(*b).cols();
                let n = na + nb;
                if rg(*a) {
                    let d = accumulate(grads, *a, m * na);
                    for i in 0..m {
                        for j in 0..na {
                            d[i * na + j] += g[i * n + j];
                        }
                    }
                }
                if rg(*b) {
                    let d = accumulate(grads, *b, m * nb);
                    for i in 0..m {
                        for j in 0..nb {
                            d[i * nb + j] += g[i * n + na + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = val(*a).dims2();
                let len = node.value.cols();
                let d = accumulate(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..len {
                        d[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let t = val(*qkv);
                let (len, three_d) = t.dims2();
                let d = accumulate(grads, *qkv, len * three_d);
                attention_backward(t.data(), probs, g, len, three_d / 3, *heads, d);
            }
            Op::RowEntropy { p } => {
                let tp = val(*p);
                let (m, n) = tp.dims2();
                let d = accumulate(grads, *p, m * n);
                for i in 0..m {
                    for j in 0..n {
                        let x = tp.data()[i * n + j];
                        if x > 0.0 {
                            d[i * n + j] -= g[i] * (x.ln() + 1.0);
                        }
                    }
                }
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                let d = accumulate(grads, *a, n);
                let s = g[0] / n as f64;
                d.iter_mut().for_each(|x| *x += s);
            }
            Op::Sum { a } => {
                let n = val(*a).len();
                let d = accumulate(grads, *a, n);
                d.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (m, v) = val(*logits).dims2();
                let d = accumulate(grads, *logits, m * v);
                let s = g[0] / *count as f64;
                for (i, target) in targets.iter().enumerate() {
                    if let Some(t) = *target {
                        for j in 0..v {
                            d[i * v + j] += s * probs[i * v + j];
                        }
                        d[i * v + t] -= s;
                    }
                }
            }
        }
    }
}

/// Returns `(out: T×d, probs: heads×T×T)`; masked entries of `probs` are zero.
pub(crate) fn attention_forward(
    qkv: &[f64],
    len: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut out = vec![0.0; len * d];
    let mut probs = vec![0.0; heads * len * len];
    let mut scores = vec![0.0; len];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..len {
            let q = &qkv[i * stride + qo..i * stride + qo + dh];
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                *s = kernels::dot(q, &qkv[j * stride + ko..j * stride + ko + dh]) * scale;
            }
            kernels::softmax_in_place(&mut scores[..=i]);
            let prow = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
            prow[..=i].copy_from_slice(&scores[..=i]);
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..=i {
                let p = scores[j];
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                for (oc, &vc) in o.iter_mut().zip(v) {
                    *oc += p * vc;
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    g: &[f64],
    len: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut dp = vec![0.0; len];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..len {
            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
            let prow = &probs[(h * len + i) * len..(h * len + i) * len + i + 1];
            // dP = dO·Vᵀ, dV += Pᵀ·dO
            for j in 0..=i {
                dp[j] = kernels::dot(go, &qkv[j * stride + vo..j * stride + vo + dh]);
                let p = prow[j];
                let dv = &mut dqkv[j * stride + vo..j * stride + vo + dh];
                for (x, &y) in dv.iter_mut().zip(go) {
                    *x += p * y;
                }
            }
            let s = kernels::dot(&dp[..=i], prow);
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dqkv[i * stride + qo + c] += ds * qkv[j * stride + ko + c];
                    dqkv[j * stride + ko + c] += ds * qkv[i * stride + qo + c];
                }
            }
        }
    }
}
