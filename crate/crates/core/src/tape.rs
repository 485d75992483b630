//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every differentiable operation appends one node holding its output value
//! and the identities of its inputs. `backward` walks the nodes in exact
//! reverse order, so an input used several times accumulates one
//! contribution per use.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    GatherFlat {
        x: Var,
        index: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    TransposedConv2x {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Bilinear {
        x: Var,
        factor: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("inner dimensions differ: {:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    /// `x · wᵀ + b` for `x: n×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise binary ----

    fn binary(&mut self, op: &'static str, a: Var, b: Var, kind: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(op, t, kind, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Min(a, b), f64::min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, Op::Max(a, b), f64::max)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row_bias", a)?;
        if self.value(bias).numel() != n {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} does not match rows of {:?}", self.shape(bias), self.shape(a)),
            ));
        }
        let bv = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push(
            "add_row_bias",
            Tensor::new(&[m, n], out)?,
            Op::AddRowBias(a, bias),
            &[a, bias],
        )
    }

    // ---- elementwise unary ----

    fn unary(&mut self, op: &'static str, a: Var, kind: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(op, t, kind, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a), softplus)
    }

    /// Exact-erf GeLU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), gelu)
    }

    /// `xᵖ` for a constant exponent; the input must be non-negative unless
    /// `p` is an integer.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("powf", a, Op::Powf(a, p), |x| x.powf(p))
    }

    // ---- reductions and normalization ----

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("softmax", "rank-0 input"))?;
        let mut out = self.value(a).data().to_vec();
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax", "NaN input"));
        }
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", Tensor::new(&shape, out)?, Op::SoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim("layer_norm", format!("gain/bias do not match width {n}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of width {n}", start + len),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::new(&[m, len], out)?,
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", format!("row counts differ: {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(&[m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push(
            "slice_rows",
            Tensor::new(&[len, n], out)?,
            Op::SliceRows { x, start },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2("concat_rows", p)?;
            if pn != n {
                return Err(Error::dim("concat_rows", format!("widths differ: {n} vs {pn}")));
            }
            m += pm;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(&[m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = self.dims2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidArgument(format!("id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            out.extend_from_slice(&tv[id * n..(id + 1) * n]);
        }
        let t = Tensor::new(&[ids.len(), n], out)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Output element `i` is input element `index[i]` (flat, row-major).
    pub fn gather_flat(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(
                "gather_flat",
                format!("index {bad} out of range for {n} elements"),
            ));
        }
        let xv = self.value(x).data();
        let t = Tensor::new(shape, index.iter().map(|&i| xv[i]).collect())?;
        self.push("gather_flat", t, Op::GatherFlat { x, index }, &[x])
    }

    // ---- spatial ----

    /// Stride-2, 2×2-kernel transposed convolution.
    ///
    /// `x: c_in×h×w`, `kernel: c_in×c_out×2×2`, `bias: c_out`; output
    /// `c_out×2h×2w`. The taps never overlap, so each output pixel receives
    /// exactly one input pixel.
    pub fn transposed_conv2x(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (c_in, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => {
                return Err(Error::dim(
                    "transposed_conv2x",
                    format!("input must be c×h×w, got {s:?}"),
                ))
            }
        };
        let (k_in, c_out) = match self.shape(kernel) {
            &[ki, co, 2, 2] => (ki, co),
            s => {
                return Err(Error::dim(
                    "transposed_conv2x",
                    format!("kernel must be c_in×c_out×2×2, got {s:?}"),
                ))
            }
        };
        if k_in != c_in {
            return Err(Error::dim(
                "transposed_conv2x",
                format!("channel mismatch: input has {c_in}, kernel expects {k_in}"),
            ));
        }
        if self.value(bias).numel() != c_out {
            return Err(Error::dim(
                "transposed_conv2x",
                format!("bias must have {c_out} entries"),
            ));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c_out * oh * ow];
        let mut tap = vec![0.0; c_out * hw];
        for a in 0..2 {
            for b in 0..2 {
                let k_ab = kernel_tap(kv, c_in, c_out, a, b);
                tap.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn(&k_ab, xv, &mut tap, c_out, c_in, hw);
                for co in 0..c_out {
                    for i in 0..h {
                        for j in 0..w {
                            out[co * oh * ow + (2 * i + a) * ow + 2 * j + b] = tap[co * hw + i * w + j] + bv[co];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[c_out, oh, ow], out)?;
        self.push(
            "transposed_conv2x",
            t,
            Op::TransposedConv2x { x, kernel, bias },
            &[x, kernel, bias],
        )
    }

    /// Bilinear upsampling of an `h×w` map by an integer factor, with
    /// half-pixel sample centers (source coordinate `(i + 0.5)/f − 0.5`,
    /// clamped to the grid).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (h, w) = self.dims2("bilinear_upsample", x)?;
        let out = bilinear_forward(self.value(x).data(), h, w, factor);
        let t = Tensor::new(&[h * factor, w * factor], out)?;
        self.push("bilinear_upsample", t, Op::Bilinear { x, factor }, &[x])
    }

    // ---- reverse pass ----

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran; call zero_grads first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Autodiff(
                "loss is detached from every differentiable leaf".into(),
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let Tape { nodes, grads, .. } = self;
        let node = &nodes[i];
        let y = node.value.data();
        let val = |v: Var| nodes[v.0].value.data();
        // Adds into the gradient buffer of `v` when it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matrix");
                let n = nodes[b.0].value.shape()[1];
                acc(a, &mut |ga| gemm_nt(g, val(b), ga, m, n, k));
                acc(b, &mut |gb| gemm_tn(val(a), g, gb, k, m, n));
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matrix");
                let n = nodes[b.0].value.shape()[0];
                acc(a, &mut |ga| gemm_nn(g, val(b), ga, m, n, k));
                acc(b, &mut |gb| gemm_tn(g, val(a), gb, n, m, k));
            }
            &Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().expect("matrix");
                acc(a, &mut |ga| {
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| zip3(ga, g, vb, |d, y| d * y));
                acc(b, &mut |gb| zip3(gb, g, va, |d, x| d * x));
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| zip3(ga, g, vb, |d, q| d / q));
                acc(b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            &Op::Min(a, b) | &Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (va, vb) = (val(a), val(b));
                // Ties route the gradient to the first argument.
                let pick_a = |k: usize| if is_min { va[k] <= vb[k] } else { va[k] >= vb[k] };
                acc(a, &mut |ga| {
                    (0..ga.len()).filter(|&k| pick_a(k)).for_each(|k| ga[k] += g[k])
                });
                acc(b, &mut |gb| {
                    (0..gb.len()).filter(|&k| !pick_a(k)).for_each(|k| gb[k] += g[k])
                });
            }
            &Op::AddRowBias(a, bias) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(bias, &mut |gb| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * c)),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Abs(a) => {
                let x = val(a);
                acc(a, &mut |ga| {
                    zip3(ga, g, x, |d, x| {
                        if x > 0.0 {
                            d
                        } else if x < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    })
                });
            }
            &Op::Exp(a) => acc(a, &mut |ga| zip3(ga, g, y, |d, y| d * y)),
            &Op::Log(a) => {
                let x = val(a);
                acc(a, &mut |ga| zip3(ga, g, x, |d, x| d / x));
            }
            &Op::Sigmoid(a) => acc(a, &mut |ga| zip3(ga, g, y, |d, y| d * y * (1.0 - y))),
            &Op::Softplus(a) => {
                let x = val(a);
                acc(a, &mut |ga| zip3(ga, g, x, |d, x| d * sigmoid(x)));
            }
            &Op::Gelu(a) => {
                let x = val(a);
                acc(a, &mut |ga| zip3(ga, g, x, |d, x| d * gelu_derivative(x)));
            }
            &Op::Powf(a, p) => {
                let x = val(a);
                acc(a, &mut |ga| {
                    zip3(ga, g, x, |d, x| if p == 0.0 { 0.0 } else { d * p * x.powf(p - 1.0) })
                });
            }
            &Op::SoftmaxRows(a) => {
                let n = *node.value.shape().last().expect("rank >= 1");
                acc(a, &mut |ga| {
                    for ((go, gi), yr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let s: f64 = gi.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for k in 0..n {
                            go[k] += yr[k] * (gi[k] - s);
                        }
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            &Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                acc(x, &mut |gx| {
                    for (r, row) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + len], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(p, &mut |gp| {
                        for (r, row) in gp.chunks_exact_mut(w).enumerate() {
                            add_into(row, &g[r * n + offset..r * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.shape()[1];
                acc(x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let n = node.value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::GatherFlat { x, index } => {
                acc(*x, &mut |gx| index.iter().zip(g).for_each(|(&i, d)| gx[i] += d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.shape()[1];
                let gv = val(*gain);
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        for c in 0..n {
                            let d = gr[c] * gv[c];
                            gx[r * n + c] += inv / nf * (nf * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        zip3(gg, gr, hr, |d, h| d * h);
                    }
                });
                acc(*bias, &mut |gb| g.chunks_exact(n).for_each(|gr| add_into(gb, gr)));
            }
            &Op::TransposedConv2x { x, kernel, bias } => {
                let (c_in, h, w) = match nodes[x.0].value.shape() {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let c_out = nodes[kernel.0].value.shape()[1];
                let (hw, ow) = (h * w, 2 * w);
                let oh_ow = 4 * hw;
                let (xv, kv) = (val(x), val(kernel));
                for a in 0..2 {
                    for b in 0..2 {
                        let mut g_tap = vec![0.0; c_out * hw];
                        for co in 0..c_out {
                            for i in 0..h {
                                for j in 0..w {
                                    g_tap[co * hw + i * w + j] = g[co * oh_ow + (2 * i + a) * ow + 2 * j + b];
                                }
                            }
                        }
                        let k_ab = kernel_tap(kv, c_in, c_out, a, b);
                        acc(x, &mut |gx| gemm_nn(&k_ab, &g_tap, gx, c_in, c_out, hw));
                        acc(kernel, &mut |gk| {
                            let mut gk_ab = vec![0.0; c_in * c_out];
                            gemm_nt(xv, &g_tap, &mut gk_ab, c_in, hw, c_out);
                            for ci in 0..c_in {
                                for co in 0..c_out {
                                    gk[((ci * c_out + co) * 2 + a) * 2 + b] += gk_ab[ci * c_out + co];
                                }
                            }
                        });
                    }
                }
                acc(bias, &mut |gb| {
                    for (co, o) in gb.iter_mut().enumerate() {
                        *o += g[co * oh_ow..(co + 1) * oh_ow].iter().sum::<f64>();
                    }
                });
            }
            &Op::Bilinear { x, factor } => {
                let (h, w) = nodes[x.0].value.dims2().expect("matrix");
                acc(x, &mut |gx| bilinear_backward(g, gx, h, w, factor));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}

fn zip3(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for k in 0..dst.len() {
        dst[k] += f(g[k], other[k]);
    }
}

/// `c_in × c_out` slice of a `c_in×c_out×2×2` kernel at tap `(a, b)`.
fn kernel_tap(kv: &[f64], c_in: usize, c_out: usize, a: usize, b: usize) -> Vec<f64> {
    let mut k = vec![0.0; c_in * c_out];
    for ci in 0..c_in {
        for co in 0..c_out {
            k[ci * c_out + co] = kv[((ci * c_out + co) * 2 + a) * 2 + b];
        }
    }
    k
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Interpolation taps along one axis: `(lo, hi, weight_hi)` per output index.
pub(crate) fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let t = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, t)
        })
        .collect()
}

fn bilinear_forward(x: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let ow = w * f;
    let mut out = vec![0.0; h * f * ow];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let top = x[y0 * w + x0] * (1.0 - wx) + x[y0 * w + x1] * wx;
            let bot = x[y1 * w + x0] * (1.0 - wx) + x[y1 * w + x1] * wx;
            out[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

fn bilinear_backward(g: &[f64], gx: &mut [f64], h: usize, w: usize, f: usize) {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let ow = w * f;
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let d = g[oy * ow + ox];
            gx[y0 * w + x0] += d * (1.0 - wy) * (1.0 - wx);
            gx[y0 * w + x1] += d * (1.0 - wy) * wx;
            gx[y1 * w + x0] += d * wy * (1.0 - wx);
            gx[y1 * w + x1] += d * wy * wx;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}
