//! Reverse-mode differentiable computation graph.
//!
//! A [`Tape`] is a topologically ordered list of operation nodes built while
//! the forward pass runs. Every builder validates shapes and checks the new
//! node's value for non-finite entries before appending, so a failed step
//! names the offending node. [`Tape::backward`] walks the list in reverse and
//! returns per-node gradients.

use thiserror::Error;

use super::kernels as kn;
use super::kernels::Conv2dDims;
use super::scalar::Scalar;
use super::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch at node {node} ({op}): {msg}")]
    Shape {
        node: NodeId,
        op: &'static str,
        msg: String,
    },
    #[error("non-finite values at node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("loss node {node} is not a scalar")]
    NonScalarLoss { node: NodeId },
}

type Result<V> = std::result::Result<V, TapeError>;

enum Op<T> {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// C = A * B^T with A (m x k), B (n x k).
    MatMulT {
        a: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad_left: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: Conv2dDims,
    },
    Tanh {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    LogSigmoid {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    LogSoftmax {
        x: NodeId,
    },
    MaskedSoftmax {
        x: NodeId,
        valid: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    SliceCols {
        x: NodeId,
        lo: usize,
        hi: usize,
    },
    Gather {
        x: NodeId,
        ids: Vec<usize>,
    },
    LstmCell {
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
        hidden: usize,
        gates: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // (mean, inv_std) per row
        stats: Vec<(T, T)>,
    },
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
    RowDot {
        a: NodeId,
        b: NodeId,
    },
    AddTiled {
        x: NodeId,
        q: NodeId,
    },
    TiledWeightedSum {
        w: NodeId,
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    /// (B, C, T, F) -> (T*B) x (C*F), time-major row blocks.
    ToTimeMajor {
        x: NodeId,
    },
    /// Nearest-centroid lookup with straight-through gradient to `z`.
    Quantize {
        z: NodeId,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::MatMulT { .. } => "matmul_t",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::LstmCell { .. } => "lstm_cell",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
            Op::RowDot { .. } => "row_dot",
            Op::AddTiled { .. } => "add_tiled",
            Op::TiledWeightedSum { .. } => "tiled_weighted_sum",
            Op::SumAll { .. } => "sum_all",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::ToTimeMajor { .. } => "to_time_major",
            Op::Quantize { .. } => "quantize",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    /// Gradient of a node, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Binds a tensor as a graph leaf; gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let needs = t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: needs,
        });
        self.nodes.len() - 1
    }

    /// Binds a tensor as a trainable parameter leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> NodeId {
        self.leaf(t.clone().with_grad())
    }

    /// Binds a tensor as a constant input leaf.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let mut t = t;
        if t.requires_grad() {
            t = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec());
        }
        self.leaf(t)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(TapeError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad: needs,
        });
        Ok(id)
    }

    fn shape_err(&self, op: &'static str, msg: String) -> TapeError {
        TapeError::Shape {
            node: self.nodes.len(),
            op,
            msg,
        }
    }

    /// Rows/cols of a node treated as a matrix (rank-1 tensors count as one row).
    fn mat_dims(&self, id: NodeId) -> (usize, usize) {
        let s = self.nodes[id].value.shape();
        match s.len() {
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    // ---- builders ----

    /// y = x * w + b with x (b x i), w (i x o), b (o).
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, i) = self.mat_dims(x);
        let ws = self.nodes[w].value.shape();
        let bs = self.nodes[b].value.shape();
        if ws.len() != 2 || ws[0] != i || bs != [ws[1]] {
            return Err(self.shape_err(
                "affine",
                format!("x {:?} w {:?} b {:?}", self.nodes[x].value.shape(), ws, bs),
            ));
        }
        let o = ws[1];
        let mut out = vec![T::zero(); rows * o];
        kn::matmul_nn_acc(
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            rows,
            i,
            o,
            &mut out,
        );
        kn::add_bias_rows(&mut out, self.nodes[b].value.data());
        self.push(
            Op::Affine { x, w, b },
            Tensor::from_vec(vec![rows, o], out),
            &[x, w, b],
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat_dims(a);
        let bs = self.nodes[b].value.shape();
        if bs.len() != 2 || bs[0] != k {
            return Err(self.shape_err("matmul", format!("a ..x{} b {:?}", k, bs)));
        }
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        kn::matmul_nn_acc(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push(
            Op::MatMul { a, b },
            Tensor::from_vec(vec![m, n], out),
            &[a, b],
        )
    }

    /// C = A * B^T with A (m x k), B (n x k).
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat_dims(a);
        let bs = self.nodes[b].value.shape();
        if bs.len() != 2 || bs[1] != k {
            return Err(self.shape_err("matmul_t", format!("a ..x{} b {:?}", k, bs)));
        }
        let n = bs[0];
        let mut out = vec![T::zero(); m * n];
        kn::matmul_nt_acc(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push(
            Op::MatMulT { a, b },
            Tensor::from_vec(vec![m, n], out),
            &[a, b],
        )
    }

    /// x (t_in x c_in), w (c_out x k x c_in), b (c_out).
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let bs = self.nodes[b].value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 3 || ws[2] != xs[1] || bs != [ws[0]] {
            return Err(self.shape_err("conv1d", format!("x {:?} w {:?} b {:?}", xs, ws, bs)));
        }
        let (t_in, c_in) = (xs[0], xs[1]);
        let (c_out, kernel) = (ws[0], ws[1]);
        let t_out = kn::conv_out_len(t_in, kernel, stride, (pad_left, pad_right));
        if t_out == 0 {
            return Err(self.shape_err(
                "conv1d",
                format!("input of {} frames too short for kernel {}", t_in, kernel),
            ));
        }
        let mut out = vec![T::zero(); t_out * c_out];
        kn::conv1d_forward(
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            self.nodes[b].value.data(),
            t_in,
            c_in,
            c_out,
            kernel,
            stride,
            pad_left,
            &mut out,
        );
        self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
            Tensor::from_vec(vec![t_out, c_out], out),
            &[x, w, b],
        )
    }

    /// x (batch, c_in, t, f), w (c_out, c_in, kt, kf), b (c_out).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let bs = self.nodes[b].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(self.shape_err("conv2d", format!("x {:?} w {:?} b {:?}", xs, ws, bs)));
        }
        let dims = Conv2dDims {
            batch: xs[0],
            c_in: xs[1],
            t_in: xs[2],
            f_in: xs[3],
            c_out: ws[0],
            kt: ws[2],
            kf: ws[3],
            stride_t: stride.0,
            stride_f: stride.1,
            pad_t: pad.0,
            pad_f: pad.1,
        };
        let (t_out, f_out) = (dims.t_out(), dims.f_out());
        if t_out == 0 || f_out == 0 {
            return Err(self.shape_err("conv2d", format!("empty output for input {:?}", xs)));
        }
        let mut out = vec![T::zero(); dims.batch * dims.c_out * t_out * f_out];
        kn::conv2d_forward(
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            self.nodes[b].value.data(),
            &dims,
            &mut out,
        );
        self.push(
            Op::Conv2d { x, w, b, dims },
            Tensor::from_vec(vec![dims.batch, dims.c_out, t_out, f_out], out),
            &[x, w, b],
        )
    }

    fn unary(
        &mut self,
        x: NodeId,
        op: Op<T>,
        f: impl Fn(T) -> T,
    ) -> Result<NodeId> {
        let value = self.nodes[x].value.map(f);
        let value = Tensor::from_vec(value.shape().to_vec(), value.data().to_vec());
        self.push(op, value, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Tanh { x }, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid { x }, kn::sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu { x }, |v| v.max(T::zero()))
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::LogSigmoid { x }, kn::log_sigmoid)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x);
        let mut data = self.nodes[x].value.data().to_vec();
        for r in 0..rows {
            kn::softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let shape = self.nodes[x].value.shape().to_vec();
        self.push(Op::Softmax { x }, Tensor::from_vec(shape, data), &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x);
        let mut data = self.nodes[x].value.data().to_vec();
        for r in 0..rows {
            kn::log_softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let shape = self.nodes[x].value.shape().to_vec();
        self.push(Op::LogSoftmax { x }, Tensor::from_vec(shape, data), &[x])
    }

    /// Row-wise softmax over the first `valid[r]` columns; the rest are
    /// exactly zero.
    pub fn masked_softmax(&mut self, x: NodeId, valid: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x);
        if valid.len() != rows || valid.iter().any(|&v| v == 0 || v > cols) {
            return Err(self.shape_err(
                "masked_softmax",
                format!("valid lengths {:?} for {} x {}", valid, rows, cols),
            ));
        }
        let mut data = self.nodes[x].value.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            kn::softmax_row(&mut row[..valid[r]]);
            for v in row[valid[r]..].iter_mut() {
                *v = T::zero();
            }
        }
        let shape = self.nodes[x].value.shape().to_vec();
        self.push(
            Op::MaskedSoftmax { x, valid },
            Tensor::from_vec(shape, data),
            &[x],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(self.shape_err(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            ));
        }
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Op::Add { a, b }, Tensor::from_vec(shape, data), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(self.shape_err(
                "mul",
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            ));
        }
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Op::Mul { a, b }, Tensor::from_vec(shape, data), &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cc = T::from_f64(c);
        self.unary(x, Op::Scale { x, c }, |v| v * cc)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(self.shape_err("concat", "no parts or bad axis".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.mat_dims(p)).collect();
        let (r0, c0) = dims[0];
        let value = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(self.shape_err("concat", format!("column mismatch {:?}", dims)));
            }
            let rows: usize = dims.iter().map(|&(r, _)| r).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.nodes[p].value.data());
            }
            Tensor::from_vec(vec![rows, c0], data)
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(self.shape_err("concat", format!("row mismatch {:?}", dims)));
            }
            let cols: usize = dims.iter().map(|&(_, c)| c).sum();
            let mut data = vec![T::zero(); r0 * cols];
            let mut at = 0;
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                let src = self.nodes[p].value.data();
                for r in 0..r0 {
                    data[r * cols + at..r * cols + at + c]
                        .copy_from_slice(&src[r * c..(r + 1) * c]);
                }
                at += c;
            }
            Tensor::from_vec(vec![r0, cols], data)
        };
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
            parts,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x);
        if lo >= hi || hi > cols {
            return Err(self.shape_err("slice_cols", format!("{}..{} of {}", lo, hi, cols)));
        }
        let src = self.nodes[x].value.data();
        let w = hi - lo;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + lo..r * cols + hi]);
        }
        self.push(
            Op::SliceCols { x, lo, hi },
            Tensor::from_vec(vec![rows, w], data),
            &[x],
        )
    }

    /// Row gather; doubles as embedding lookup when `x` is a table parameter.
    pub fn gather(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(self.shape_err("gather", format!("row {} out of {}", bad, rows)));
        }
        let src = self.nodes[x].value.data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.push(
            Op::Gather {
                x,
                ids: ids.to_vec(),
            },
            Tensor::from_vec(vec![ids.len(), cols], data),
            &[x],
        )
    }

    /// One LSTM step; output is (batch x 2h) holding `[h' | c']`.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (batch, in_dim) = self.mat_dims(x);
        let (hb, hidden) = self.mat_dims(h);
        let (cb, ch) = self.mat_dims(c);
        let ws_ih = self.nodes[w_ih].value.shape();
        let ws_hh = self.nodes[w_hh].value.shape();
        let bs = self.nodes[bias].value.shape();
        if hb != batch
            || cb != batch
            || ch != hidden
            || ws_ih != [in_dim, 4 * hidden]
            || ws_hh != [hidden, 4 * hidden]
            || bs != [4 * hidden]
        {
            return Err(self.shape_err(
                "lstm_cell",
                format!(
                    "x {:?} h {:?} c {:?} w_ih {:?} w_hh {:?} b {:?}",
                    self.nodes[x].value.shape(),
                    self.nodes[h].value.shape(),
                    self.nodes[c].value.shape(),
                    ws_ih,
                    ws_hh,
                    bs
                ),
            ));
        }
        let mut h_new = vec![T::zero(); batch * hidden];
        let mut c_new = vec![T::zero(); batch * hidden];
        let gates = kn::lstm_cell_forward(
            self.nodes[x].value.data(),
            self.nodes[h].value.data(),
            self.nodes[c].value.data(),
            self.nodes[w_ih].value.data(),
            self.nodes[w_hh].value.data(),
            self.nodes[bias].value.data(),
            batch,
            in_dim,
            hidden,
            &mut h_new,
            &mut c_new,
        );
        let mut out = Vec::with_capacity(batch * 2 * hidden);
        for b in 0..batch {
            out.extend_from_slice(&h_new[b * hidden..(b + 1) * hidden]);
            out.extend_from_slice(&c_new[b * hidden..(b + 1) * hidden]);
        }
        self.push(
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                bias,
                hidden,
                gates,
            },
            Tensor::from_vec(vec![batch, 2 * hidden], out),
            &[x, h, c, w_ih, w_hh, bias],
        )
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x);
        if self.nodes[gamma].value.shape() != [cols] || self.nodes[beta].value.shape() != [cols] {
            return Err(self.shape_err("layer_norm", format!("gamma/beta for width {}", cols)));
        }
        let src = self.nodes[x].value.data();
        let g = self.nodes[gamma].value.data();
        let be = self.nodes[beta].value.data();
        let epst = T::from_f64(eps);
        let mut data = vec![T::zero(); rows * cols];
        let mut stats = Vec::with_capacity(rows);
        let inv_n = T::from_f64(1.0 / cols as f64);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_n;
            let inv_std = T::one() / (var + epst).sqrt();
            stats.push((mean, inv_std));
            let dst = &mut data[r * cols..(r + 1) * cols];
            for j in 0..cols {
                dst[j] = (row[j] - mean) * inv_std * g[j] + be[j];
            }
        }
        let shape = self.nodes[x].value.shape().to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            Tensor::from_vec(shape, data),
            &[x, gamma, beta],
        )
    }

    /// Per-row negative log-likelihood; `None` targets contribute zero.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: Vec<Option<usize>>,
    ) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(logits);
        if targets.len() != rows || targets.iter().flatten().any(|&t| t >= cols) {
            return Err(self.shape_err(
                "cross_entropy_rows",
                format!("{} targets for {} rows of width {}", targets.len(), rows, cols),
            ));
        }
        let src = self.nodes[logits].value.data();
        let mut data = vec![T::zero(); rows];
        let mut scratch = vec![T::zero(); cols];
        for r in 0..rows {
            if let Some(t) = targets[r] {
                scratch.copy_from_slice(&src[r * cols..(r + 1) * cols]);
                kn::log_softmax_row(&mut scratch);
                data[r] = -scratch[t];
            }
        }
        self.push(
            Op::CrossEntropyRows { logits, targets },
            Tensor::from_vec(vec![rows], data),
            &[logits],
        )
    }

    /// Row-wise dot product of two (b x d) matrices -> (b).
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.mat_dims(a);
        let (rb, cb) = self.mat_dims(b);
        if ra != rb || ca != cb {
            return Err(self.shape_err("row_dot", format!("{}x{} vs {}x{}", ra, ca, rb, cb)));
        }
        let xa = self.nodes[a].value.data();
        let xb = self.nodes[b].value.data();
        let mut data = vec![T::zero(); ra];
        for r in 0..ra {
            let mut acc = T::zero();
            for j in 0..ca {
                acc += xa[r * ca + j] * xb[r * ca + j];
            }
            data[r] = acc;
        }
        self.push(
            Op::RowDot { a, b },
            Tensor::from_vec(vec![ra], data),
            &[a, b],
        )
    }

    /// x (s*b x a) + q (b x a) with q tiled over the row blocks: row r gets
    /// q row (r mod b).
    pub fn add_tiled(&mut self, x: NodeId, q: NodeId) -> Result<NodeId> {
        let (n, a) = self.mat_dims(x);
        let (b, qa) = self.mat_dims(q);
        if qa != a || b == 0 || n % b != 0 {
            return Err(self.shape_err("add_tiled", format!("{}x{} + {}x{}", n, a, b, qa)));
        }
        let xs = self.nodes[x].value.data();
        let qs = self.nodes[q].value.data();
        let mut data = vec![T::zero(); n * a];
        for r in 0..n {
            let qrow = &qs[(r % b) * a..(r % b + 1) * a];
            for j in 0..a {
                data[r * a + j] = xs[r * a + j] + qrow[j];
            }
        }
        self.push(
            Op::AddTiled { x, q },
            Tensor::from_vec(vec![n, a], data),
            &[x, q],
        )
    }

    /// out[b_] = sum_s w[b_, s] * x[s*b + b_] with w (b x s), x (s*b x h).
    pub fn tiled_weighted_sum(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (b, s) = self.mat_dims(w);
        let (n, h) = self.mat_dims(x);
        if n != b * s {
            return Err(self.shape_err(
                "tiled_weighted_sum",
                format!("w {}x{} x {}x{}", b, s, n, h),
            ));
        }
        let ws = self.nodes[w].value.data();
        let xs = self.nodes[x].value.data();
        let mut data = vec![T::zero(); b * h];
        for bi in 0..b {
            let dst = &mut data[bi * h..(bi + 1) * h];
            for si in 0..s {
                let wv = ws[bi * s + si];
                if wv == T::zero() {
                    continue;
                }
                let row = &xs[(si * b + bi) * h..(si * b + bi + 1) * h];
                for (d, &v) in dst.iter_mut().zip(row.iter()) {
                    *d += wv * v;
                }
            }
        }
        self.push(
            Op::TiledWeightedSum { w, x },
            Tensor::from_vec(vec![b, h], data),
            &[w, x],
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.nodes[x].value.data() {
            acc += v;
        }
        self.push(Op::SumAll { x }, Tensor::scalar(acc), &[x])
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(x);
        let src = self.nodes[x].value.data();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        self.push(
            Op::Transpose { x },
            Tensor::from_vec(vec![cols, rows], data),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(self.shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x].value.shape(), shape),
            ));
        }
        let data = self.nodes[x].value.data().to_vec();
        self.push(Op::Reshape { x }, Tensor::from_vec(shape, data), &[x])
    }

    /// (batch, c, t, f) -> (t*batch) x (c*f) with row blocks ordered by time.
    pub fn to_time_major(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x].value.shape().to_vec();
        if s.len() != 4 {
            return Err(self.shape_err("to_time_major", format!("rank {} input", s.len())));
        }
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let src = self.nodes[x].value.data();
        let mut data = vec![T::zero(); b * c * t * f];
        let cf = c * f;
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let row = ti * b + bi;
                    let src_off = ((bi * c + ci) * t + ti) * f;
                    data[row * cf + ci * f..row * cf + (ci + 1) * f]
                        .copy_from_slice(&src[src_off..src_off + f]);
                }
            }
        }
        self.push(
            Op::ToTimeMajor { x },
            Tensor::from_vec(vec![t * b, cf], data),
            &[x],
        )
    }

    /// Nearest centroid per row (ties to the lowest index). The output holds
    /// the selected centroid rows; the backward pass copies the output
    /// gradient to `z` unchanged (straight-through) and sends nothing to the
    /// codebook.
    pub fn quantize(&mut self, z: NodeId, codebook: NodeId) -> Result<NodeId> {
        let (rows, d) = self.mat_dims(z);
        let (_v, cd) = self.mat_dims(codebook);
        if cd != d {
            return Err(self.shape_err("quantize", format!("dim {} vs codebook dim {}", d, cd)));
        }
        let ids = nearest_centroids(
            self.nodes[z].value.data(),
            self.nodes[codebook].value.data(),
            rows,
            d,
        );
        let cb = self.nodes[codebook].value.data();
        let mut data = Vec::with_capacity(rows * d);
        for &i in &ids {
            data.extend_from_slice(&cb[i * d..(i + 1) * d]);
        }
        self.push(
            Op::Quantize { z },
            Tensor::from_vec(vec![rows, d], data),
            &[z],
        )
    }

    /// Tokens chosen by the last `quantize` on these inputs (recomputed; the
    /// assignment is deterministic).
    pub fn quantize_tokens(&self, z: NodeId, codebook: NodeId) -> Vec<usize> {
        let (rows, d) = self.mat_dims(z);
        nearest_centroids(
            self.nodes[z].value.data(),
            self.nodes[codebook].value.data(),
            rows,
            d,
        )
    }

    // ---- backward ----

    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.nodes[loss].value.is_scalar_shape() {
            return Err(TapeError::NonScalarLoss { node: loss });
        }
        let n = self.nodes.len();
        let mut slots: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        slots[loss] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                slots[i] = None;
                continue;
            }
            let Some(grad) = slots[i].take() else {
                continue;
            };
            self.backprop_node(i, &grad, &mut slots);
            slots[i] = Some(grad);
        }
        let grads = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.map(|g| Tensor::from_vec(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { slots: grads })
    }

    fn acc(&self, slots: &mut [Option<Vec<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = &mut slots[id];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[id].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: NodeId, grad: &[T], slots: &mut [Option<Vec<T>>]) {
        let val = |id: NodeId| self.nodes[id].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (rows, in_dim) = self.mat_dims(*x);
                let o = self.nodes[*w].value.shape()[1];
                self.acc(slots, *x, |dx| {
                    kn::matmul_nt_acc(grad, val(*w), rows, o, in_dim, dx)
                });
                self.acc(slots, *w, |dw| {
                    kn::matmul_tn_acc(val(*x), grad, rows, in_dim, o, dw)
                });
                self.acc(slots, *b, |db| {
                    for r in 0..rows {
                        for j in 0..o {
                            db[j] += grad[r * o + j];
                        }
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.mat_dims(*a);
                let n = self.nodes[*b].value.shape()[1];
                self.acc(slots, *a, |da| kn::matmul_nt_acc(grad, val(*b), m, n, k, da));
                self.acc(slots, *b, |db| kn::matmul_tn_acc(val(*a), grad, m, k, n, db));
            }
            Op::MatMulT { a, b } => {
                let (m, k) = self.mat_dims(*a);
                let n = self.nodes[*b].value.shape()[0];
                self.acc(slots, *a, |da| kn::matmul_nn_acc(grad, val(*b), m, n, k, da));
                self.acc(slots, *b, |db| kn::matmul_tn_acc(grad, val(*a), m, n, k, db));
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let xs = self.nodes[*x].value.shape();
                let ws = self.nodes[*w].value.shape();
                let (t_in, c_in) = (xs[0], xs[1]);
                let (c_out, kernel) = (ws[0], ws[1]);
                let mut dx = vec![T::zero(); t_in * c_in];
                let mut dw = vec![T::zero(); c_out * kernel * c_in];
                let mut db = vec![T::zero(); c_out];
                kn::conv1d_backward(
                    val(*x),
                    val(*w),
                    grad,
                    t_in,
                    c_in,
                    c_out,
                    kernel,
                    *stride,
                    *pad_left,
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                self.acc(slots, *x, |g| add_into(g, &dx));
                self.acc(slots, *w, |g| add_into(g, &dw));
                self.acc(slots, *b, |g| add_into(g, &db));
            }
            Op::Conv2d { x, w, b, dims } => {
                let mut dx = vec![T::zero(); self.nodes[*x].value.numel()];
                let mut dw = vec![T::zero(); self.nodes[*w].value.numel()];
                let mut db = vec![T::zero(); self.nodes[*b].value.numel()];
                kn::conv2d_backward(val(*x), val(*w), grad, dims, &mut dx, &mut dw, &mut db);
                self.acc(slots, *x, |g| add_into(g, &dx));
                self.acc(slots, *w, |g| add_into(g, &dw));
                self.acc(slots, *b, |g| add_into(g, &db));
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                self.acc(slots, *x, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += grad[j] * (T::one() - y[j] * y[j]);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                self.acc(slots, *x, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += grad[j] * y[j] * (T::one() - y[j]);
                    }
                });
            }
            Op::Relu { x } => {
                let y = self.nodes[i].value.data();
                self.acc(slots, *x, |dx| {
                    for j in 0..dx.len() {
                        if y[j] > T::zero() {
                            dx[j] += grad[j];
                        }
                    }
                });
            }
            Op::LogSigmoid { x } => {
                let y = self.nodes[i].value.data();
                self.acc(slots, *x, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += grad[j] * (T::one() - y[j].exp());
                    }
                });
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let (rows, cols) = self.mat_dims(*x);
                self.acc(slots, *x, |dx| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &grad[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..cols {
                            dx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let y = self.nodes[i].value.data();
                let (rows, cols) = self.mat_dims(*x);
                self.acc(slots, *x, |dx| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &grad[r * cols..(r + 1) * cols];
                        let mut gsum = T::zero();
                        for j in 0..cols {
                            gsum += gr[j];
                        }
                        for j in 0..cols {
                            dx[r * cols + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, valid } => {
                let y = self.nodes[i].value.data();
                let (rows, cols) = self.mat_dims(*x);
                self.acc(slots, *x, |dx| {
                    for r in 0..rows {
                        let v = valid[r];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &grad[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for j in 0..v {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..v {
                            dx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(slots, *a, |da| add_into(da, grad));
                self.acc(slots, *b, |db| add_into(db, grad));
            }
            Op::Mul { a, b } => {
                self.acc(slots, *a, |da| {
                    let bv = val(*b);
                    for j in 0..da.len() {
                        da[j] += grad[j] * bv[j];
                    }
                });
                self.acc(slots, *b, |db| {
                    let av = val(*a);
                    for j in 0..db.len() {
                        db[j] += grad[j] * av[j];
                    }
                });
            }
            Op::Scale { x, c } => {
                let cc = T::from_f64(*c);
                self.acc(slots, *x, |dx| {
                    for j in 0..dx.len() {
                        dx[j] += grad[j] * cc;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.numel();
                        let seg = &grad[at..at + len];
                        self.acc(slots, p, |dp| add_into(dp, seg));
                        at += len;
                    }
                } else {
                    let (rows, cols) = self.mat_dims(i);
                    let mut at = 0;
                    for &p in parts {
                        let (_, c) = self.mat_dims(p);
                        self.acc(slots, p, |dp| {
                            for r in 0..rows {
                                for j in 0..c {
                                    dp[r * c + j] += grad[r * cols + at + j];
                                }
                            }
                        });
                        at += c;
                    }
                }
            }
            Op::SliceCols { x, lo, hi } => {
                let (rows, cols) = self.mat_dims(*x);
                let w = hi - lo;
                self.acc(slots, *x, |dx| {
                    for r in 0..rows {
                        for j in 0..w {
                            dx[r * cols + lo + j] += grad[r * w + j];
                        }
                    }
                });
            }
            Op::Gather { x, ids } => {
                let (_, cols) = self.mat_dims(*x);
                self.acc(slots, *x, |dx| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dx[id * cols + j] += grad[r * cols + j];
                        }
                    }
                });
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                bias,
                hidden,
                gates,
            } => {
                let (batch, in_dim) = self.mat_dims(*x);
                let hid = *hidden;
                // Output rows are [h' | c']; split the incoming gradient.
                let mut dh_new = vec![T::zero(); batch * hid];
                let mut dc_new = vec![T::zero(); batch * hid];
                let mut c_new = vec![T::zero(); batch * hid];
                let out = self.nodes[i].value.data();
                for b in 0..batch {
                    for j in 0..hid {
                        dh_new[b * hid + j] = grad[b * 2 * hid + j];
                        dc_new[b * hid + j] = grad[b * 2 * hid + hid + j];
                        c_new[b * hid + j] = out[b * 2 * hid + hid + j];
                    }
                }
                let mut dx = vec![T::zero(); batch * in_dim];
                let mut dh = vec![T::zero(); batch * hid];
                let mut dc = vec![T::zero(); batch * hid];
                let mut dw_ih = vec![T::zero(); in_dim * 4 * hid];
                let mut dw_hh = vec![T::zero(); hid * 4 * hid];
                let mut dbias = vec![T::zero(); 4 * hid];
                kn::lstm_cell_backward(
                    val(*x),
                    val(*h),
                    val(*c),
                    val(*w_ih),
                    val(*w_hh),
                    gates,
                    &c_new,
                    &dh_new,
                    &dc_new,
                    batch,
                    in_dim,
                    hid,
                    &mut dx,
                    &mut dh,
                    &mut dc,
                    &mut dw_ih,
                    &mut dw_hh,
                    &mut dbias,
                );
                self.acc(slots, *x, |g| add_into(g, &dx));
                self.acc(slots, *h, |g| add_into(g, &dh));
                self.acc(slots, *c, |g| add_into(g, &dc));
                self.acc(slots, *w_ih, |g| add_into(g, &dw_ih));
                self.acc(slots, *w_hh, |g| add_into(g, &dw_hh));
                self.acc(slots, *bias, |g| add_into(g, &dbias));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (rows, cols) = self.mat_dims(*x);
                let xv = val(*x);
                let gv = val(*gamma);
                let inv_n = T::from_f64(1.0 / cols as f64);
                self.acc(slots, *gamma, |dg| {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        for j in 0..cols {
                            let xh = (xv[r * cols + j] - mean) * inv_std;
                            dg[j] += grad[r * cols + j] * xh;
                        }
                    }
                });
                self.acc(slots, *beta, |db| {
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += grad[r * cols + j];
                        }
                    }
                });
                self.acc(slots, *x, |dx| {
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..cols {
                            let xh = (xv[r * cols + j] - mean) * inv_std;
                            let dxh = grad[r * cols + j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        sum_dxh *= inv_n;
                        sum_dxh_xh *= inv_n;
                        for j in 0..cols {
                            let xh = (xv[r * cols + j] - mean) * inv_std;
                            let dxh = grad[r * cols + j] * gv[j];
                            dx[r * cols + j] += inv_std * (dxh - sum_dxh - xh * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (rows, cols) = self.mat_dims(*logits);
                let lv = val(*logits);
                self.acc(slots, *logits, |dl| {
                    let mut sm = vec![T::zero(); cols];
                    for r in 0..rows {
                        let Some(t) = targets[r] else { continue };
                        let g = grad[r];
                        if g == T::zero() {
                            continue;
                        }
                        sm.copy_from_slice(&lv[r * cols..(r + 1) * cols]);
                        kn::softmax_row(&mut sm);
                        for j in 0..cols {
                            let ind = if j == t { T::one() } else { T::zero() };
                            dl[r * cols + j] += g * (sm[j] - ind);
                        }
                    }
                });
            }
            Op::RowDot { a, b } => {
                let (rows, cols) = self.mat_dims(*a);
                self.acc(slots, *a, |da| {
                    let bv = val(*b);
                    for r in 0..rows {
                        for j in 0..cols {
                            da[r * cols + j] += grad[r] * bv[r * cols + j];
                        }
                    }
                });
                self.acc(slots, *b, |db| {
                    let av = val(*a);
                    for r in 0..rows {
                        for j in 0..cols {
                            db[r * cols + j] += grad[r] * av[r * cols + j];
                        }
                    }
                });
            }
            Op::AddTiled { x, q } => {
                let (n, a) = self.mat_dims(*x);
                let (b, _) = self.mat_dims(*q);
                self.acc(slots, *x, |dx| add_into(dx, grad));
                self.acc(slots, *q, |dq| {
                    for r in 0..n {
                        let qb = r % b;
                        for j in 0..a {
                            dq[qb * a + j] += grad[r * a + j];
                        }
                    }
                });
            }
            Op::TiledWeightedSum { w, x } => {
                let (b, s) = self.mat_dims(*w);
                let (_, h) = self.mat_dims(*x);
                self.acc(slots, *w, |dw| {
                    let xv = val(*x);
                    for bi in 0..b {
                        for si in 0..s {
                            let row = &xv[(si * b + bi) * h..(si * b + bi + 1) * h];
                            let gr = &grad[bi * h..(bi + 1) * h];
                            let mut acc = T::zero();
                            for j in 0..h {
                                acc += gr[j] * row[j];
                            }
                            dw[bi * s + si] += acc;
                        }
                    }
                });
                self.acc(slots, *x, |dx| {
                    let wv = val(*w);
                    for bi in 0..b {
                        let gr = &grad[bi * h..(bi + 1) * h];
                        for si in 0..s {
                            let wvv = wv[bi * s + si];
                            if wvv == T::zero() {
                                continue;
                            }
                            let dst = &mut dx[(si * b + bi) * h..(si * b + bi + 1) * h];
                            for j in 0..h {
                                dst[j] += wvv * gr[j];
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                self.acc(slots, *x, |dx| {
                    for v in dx.iter_mut() {
                        *v += grad[0];
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(slots, *x, |dx| add_into(dx, grad));
            }
            Op::Transpose { x } => {
                let (rows, cols) = self.mat_dims(*x);
                self.acc(slots, *x, |dx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += grad[c * rows + r];
                        }
                    }
                });
            }
            Op::ToTimeMajor { x } => {
                let s = self.nodes[*x].value.shape().to_vec();
                let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
                let cf = c * f;
                self.acc(slots, *x, |dx| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for ti in 0..t {
                                let row = ti * b + bi;
                                let dst_off = ((bi * c + ci) * t + ti) * f;
                                for j in 0..f {
                                    dx[dst_off + j] += grad[row * cf + ci * f + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Quantize { z } => {
                // Straight-through: gradient w.r.t. z equals the output
                // gradient exactly.
                self.acc(slots, *z, |dz| add_into(dz, grad));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// Nearest centroid per row by squared distance, ties to the lowest index.
pub fn nearest_centroids<T: Scalar>(z: &[T], codebook: &[T], rows: usize, d: usize) -> Vec<usize> {
    let v = codebook.len() / d;
    let mut ids = Vec::with_capacity(rows);
    for r in 0..rows {
        let zr = &z[r * d..(r + 1) * d];
        let mut best = 0usize;
        let mut best_dist = T::from_f64(f64::INFINITY);
        for c in 0..v {
            let cr = &codebook[c * d..(c + 1) * d];
            let mut dist = T::zero();
            for j in 0..d {
                let diff = zr[j] - cr[j];
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        ids.push(best);
    }
    ids
}
