use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward bookkeeping for one recorded op.
#[derive(Debug)]
enum Op {
    Matmul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    BroadcastAdd { a: Var, b: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Embedding { table: Var, indices: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Swish { a: Var },
    Relu { a: Var },
    Glu { a: Var },
    DepthwiseConv { x: Var, w: Var, b: Var },
    MaxPool { a: Var, argmax: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
    /// Scalar whose gradient w.r.t. `a` was computed outside the tape.
    External { a: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// Linear record of executed ops. Values live on the tape; gradients are
/// produced by [`Tape::backward`].
///
/// Stochastic ops draw from a ChaCha stream seeded at construction, so running
/// the same program on a tape with the same seed gives bit-identical values.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    seed: Option<u64>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn wrt_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, numel: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; numel])
}

impl Tape {
    /// Tape without a random stream; stochastic ops in training mode fail.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            seed: None,
            rng: None,
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            seed: Some(seed),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Number of values (leaves and op outputs) held.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of ops recorded for differentiation.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that collects a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

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

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.any_grad(inputs);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- linear algebra ------------------------------------------------

    /// `a (m x k) @ b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.record(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::Matmul { a, b, trans_b: false },
        )
    }

    /// `a (m x k) @ b^T` where `b` is `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (n, k2) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2} (b transposed)")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.record(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::Matmul { a, b, trans_b: true },
        )
    }

    /// `x (m x in) @ w (in x out) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.matrix_dims("linear", x)?;
        let (k2, n) = self.matrix_dims("linear", w)?;
        if k != k2 {
            return Err(Error::shape("linear", format!("input width {k} vs weight rows {k2}")));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return Err(Error::shape("linear", format!("bias length {} vs {n}", bias.len())));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_nn(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("linear", Tensor::from_parts(vec![m, n], out), &inputs, Op::Linear { x, w, b })
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.record("add", Tensor::from_parts(shape, data), &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.record("sub", Tensor::from_parts(shape, data), &[a, b], Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.record("multiply", Tensor::from_parts(shape, data), &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.map(a, |x| x * factor);
        let shape = self.shape(a).to_vec();
        self.record("scale", Tensor::from_parts(shape, data), &[a], Op::Scale { a, factor })
    }

    /// Every row of `a (m x n)` plus every row of `b (k x n)`; row `i*k + j`
    /// of the `(m*k) x n` result is `a[i] + b[j]`.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("broadcast_add", a)?;
        let (k, n2) = self.matrix_dims("broadcast_add", b)?;
        if n != n2 {
            return Err(Error::shape("broadcast_add", format!("row widths {n} vs {n2}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * k * n);
        for i in 0..m {
            let ar = av.row(i);
            for j in 0..k {
                out.extend(ar.iter().zip(bv.row(j)).map(|(x, y)| x + y));
            }
        }
        self.record(
            "broadcast_add",
            Tensor::from_parts(vec![m * k, n], out),
            &[a, b],
            Op::BroadcastAdd { a, b },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.map(a, kernels::sigmoid);
        let shape = self.shape(a).to_vec();
        self.record("sigmoid", Tensor::from_parts(shape, data), &[a], Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.map(a, f64::tanh);
        let shape = self.shape(a).to_vec();
        self.record("tanh", Tensor::from_parts(shape, data), &[a], Op::Tanh { a })
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let data = self.map(a, |x| x * kernels::sigmoid(x));
        let shape = self.shape(a).to_vec();
        self.record("swish", Tensor::from_parts(shape, data), &[a], Op::Swish { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.map(a, |x| x.max(0.0));
        let shape = self.shape(a).to_vec();
        self.record("relu", Tensor::from_parts(shape, data), &[a], Op::Relu { a })
    }

    /// Gated linear unit over the last axis: first half times sigmoid of the second half.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let width = av.last_dim();
        if width % 2 != 0 {
            return Err(Error::shape("glu", format!("last axis {width} is odd")));
        }
        let half = width / 2;
        let mut out = Vec::with_capacity(av.numel() / 2);
        for r in 0..av.rows() {
            let row = av.row(r);
            out.extend((0..half).map(|c| row[c] * kernels::sigmoid(row[half + c])));
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        self.record("glu", Tensor::from_parts(shape, out), &[a], Op::Glu { a })
    }

    // ---- shape manipulation -------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.record(
            "concat",
            Tensor::from_parts(shape, out),
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.record(
            "slice",
            Tensor::from_parts(out_shape, out),
            &[a],
            Op::Slice { a, axis, start },
        )
    }

    /// Rows of `table` selected by `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("embedding_lookup", table)?;
        if indices.is_empty() {
            return Err(Error::shape("embedding_lookup", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("index {bad} outside table of {n} rows"),
            ));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(tv.row(i));
        }
        self.record(
            "embedding_lookup",
            Tensor::from_parts(vec![indices.len(), d], out),
            &[table],
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    // ---- normalisation and distributions ------------------------------

    /// Normalises each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma/beta lengths {}/{} vs feature width {c}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (i, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let shape = xv.shape().to_vec();
        self.record(
            "layer_norm",
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last axis where row `i` only sees columns `0..=i`;
    /// the masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        if causal {
            self.matrix_dims("softmax", a)?;
        }
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = vec![0.0; av.numel()];
        for r in 0..av.rows() {
            let visible = if causal { (r + 1).min(c) } else { c };
            kernels::softmax_into(&av.row(r)[..visible], &mut out[r * c..r * c + visible]);
        }
        let shape = av.shape().to_vec();
        self.record("softmax", Tensor::from_parts(shape, out), &[a], Op::Softmax { a })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = vec![0.0; av.numel()];
        for r in 0..av.rows() {
            let row = av.row(r);
            let lse = kernels::logsumexp(row);
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = av.shape().to_vec();
        self.record("log_softmax", Tensor::from_parts(shape, out), &[a], Op::LogSoftmax { a })
    }

    // ---- sequence ops --------------------------------------------------

    /// Depthwise 1-D convolution over time, left-padded with `kernel - 1`
    /// zeros. `x` is `frames x channels`, `w` is `channels x kernel`, `b` is
    /// `channels`. Output frame `t` reads input frames `t-kernel+1..=t` only.
    pub fn depthwise_conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t_len, c) = self.matrix_dims("depthwise_conv1d_causal", x)?;
        let (c2, k) = self.matrix_dims("depthwise_conv1d_causal", w)?;
        if c != c2 || self.value(b).numel() != c {
            return Err(Error::shape(
                "depthwise_conv1d_causal",
                format!("{c} channels vs weight {c2}x{k}, bias {}", self.value(b).numel()),
            ));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            let orow = &mut out[t * c..(t + 1) * c];
            orow.copy_from_slice(bv);
            for j in 0..k {
                // tap j reads frame t + j - (k - 1)
                let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                let xrow = &xv[s * c..(s + 1) * c];
                for ch in 0..c {
                    orow[ch] += wv[ch * k + j] * xrow[ch];
                }
            }
        }
        self.record(
            "depthwise_conv1d_causal",
            Tensor::from_parts(vec![t_len, c], out),
            &[x, w, b],
            Op::DepthwiseConv { x, w, b },
        )
    }

    /// Stride-2 max pooling over the time axis (rows); a trailing odd frame is dropped.
    pub fn max_pool1d_time(&mut self, a: Var) -> Result<Var> {
        let (t_len, c) = self.matrix_dims("max_pool1d_time", a)?;
        if t_len < 2 {
            return Err(Error::shape("max_pool1d_time", format!("{t_len} frames, need at least 2")));
        }
        let out_len = t_len / 2;
        let av = self.value(a);
        let mut out = Vec::with_capacity(out_len * c);
        let mut argmax = Vec::with_capacity(out_len * c);
        for t in 0..out_len {
            let (r0, r1) = (av.row(2 * t), av.row(2 * t + 1));
            for ch in 0..c {
                if r1[ch] > r0[ch] {
                    out.push(r1[ch]);
                    argmax.push((2 * t + 1) * c + ch);
                } else {
                    out.push(r0[ch]);
                    argmax.push(2 * t * c + ch);
                }
            }
        }
        self.record(
            "max_pool1d_time",
            Tensor::from_parts(vec![out_len, c], out),
            &[a],
            Op::MaxPool { a, argmax },
        )
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let numel = self.value(a).numel();
        let rng = self.rng.as_mut().ok_or_else(|| {
            Error::Contract("dropout in training mode needs a seeded tape".into())
        })?;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.record("dropout", Tensor::from_parts(shape, data), &[a], Op::Dropout { a, mask })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.record("sum", Tensor::scalar(s), &[a], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.record("mean", Tensor::scalar(s), &[a], Op::Mean { a })
    }

    /// Records a scalar `value` computed outside the tape from `a`, along
    /// with its gradient w.r.t. `a`.
    pub fn external_scalar(&mut self, a: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(a).numel() {
            return Err(Error::shape(
                "external_scalar",
                format!("gradient length {} vs input {}", grad.len(), self.value(a).numel()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "external_scalar" });
        }
        self.record("external_scalar", Tensor::scalar(value), &[a], Op::External { a, grad })
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).data().iter().map(|&x| f(x)).collect()
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    // ---- reverse pass --------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(op, &node.value, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // only leaves keep their gradients
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if n.op.is_some() || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Matmul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    if *trans_b {
                        // dA = dOut (m x n) @ B (n x k)
                        kernels::matmul_nn(g, bv.data(), ga, m, n, k);
                    } else {
                        // dA = dOut @ B^T, B is k x n
                        kernels::matmul_nt(g, bv.data(), ga, m, n, k);
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    if *trans_b {
                        // dB (n x k) = dOut^T @ A
                        kernels::matmul_tn(g, av.data(), gb, m, n, k);
                    } else {
                        // dB (k x n) = A^T @ dOut
                        kernels::matmul_tn(av.data(), g, gb, m, k, n);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k) = (xv.shape()[0], xv.shape()[1]);
                let n = wv.shape()[1];
                if self.wants(*x) {
                    kernels::matmul_nt(g, wv.data(), accumulate(grads, *x, m * k), m, n, k);
                }
                if self.wants(*w) {
                    kernels::matmul_tn(xv.data(), g, accumulate(grads, *w, k * n), m, k, n);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = accumulate(grads, *b, n);
                        for row in g.chunks_exact(n) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(accumulate(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    add_into(accumulate(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    for (d, s) in accumulate(grads, *b, g.len()).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                for (d, s) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s * factor;
                }
            }
            Op::BroadcastAdd { a, b } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = self.shape(*b)[0];
                if self.wants(*a) {
                    let ga = accumulate(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..k {
                            let src = &g[(i * k + j) * n..(i * k + j + 1) * n];
                            add_into(&mut ga[i * n..(i + 1) * n], src);
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    for i in 0..m {
                        for j in 0..k {
                            let src = &g[(i * k + j) * n..(i * k + j + 1) * n];
                            add_into(&mut gb[j * n..(j + 1) * n], src);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let gv = accumulate(grads, v, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let ga = accumulate(grads, *a, outer * shape[*axis] * inner);
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    add_into(&mut ga[base..base + len * inner], src);
                }
            }
            Op::Embedding { table, indices } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let gt = accumulate(grads, *table, tv.numel());
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out.last_dim();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let gg = accumulate(grads, *gamma, c);
                    for (r, grow) in g.chunks_exact(c).enumerate() {
                        for i in 0..c {
                            gg[i] += grow[i] * xhat[r * c + i];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = accumulate(grads, *beta, c);
                    for grow in g.chunks_exact(c) {
                        add_into(gb, grow);
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    for (r, grow) in g.chunks_exact(c).enumerate() {
                        let h = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for i in 0..c {
                            let d = grow[i] * gam[i];
                            sum_d += d;
                            sum_dh += d * h[i];
                        }
                        let scale = inv_std[r] / c as f64;
                        for i in 0..c {
                            let d = grow[i] * gam[i];
                            gx[r * c + i] += scale * (c as f64 * d - sum_d - h[i] * sum_dh);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let c = out.last_dim();
                let ga = accumulate(grads, *a, g.len());
                for (r, (grow, yrow)) in g.chunks_exact(c).zip(out.data().chunks_exact(c)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for i in 0..c {
                        ga[r * c + i] += yrow[i] * (grow[i] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let c = out.last_dim();
                let ga = accumulate(grads, *a, g.len());
                for (r, (grow, yrow)) in g.chunks_exact(c).zip(out.data().chunks_exact(c)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for i in 0..c {
                        ga[r * c + i] += grow[i] - yrow[i].exp() * total;
                    }
                }
            }
            Op::Sigmoid { a } => {
                let ga = accumulate(grads, *a, g.len());
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y * (1.0 - y);
                }
            }
            Op::Tanh { a } => {
                let ga = accumulate(grads, *a, g.len());
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += s * (1.0 - y * y);
                }
            }
            Op::Swish { a } => {
                let xv = self.value(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    let sg = kernels::sigmoid(xv[i]);
                    ga[i] += g[i] * (sg + xv[i] * sg * (1.0 - sg));
                }
            }
            Op::Relu { a } => {
                let xv = self.value(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Glu { a } => {
                let av = self.value(*a);
                let width = av.last_dim();
                let half = width / 2;
                let ga = accumulate(grads, *a, av.numel());
                for r in 0..av.rows() {
                    let row = av.row(r);
                    for c in 0..half {
                        let d = g[r * half + c];
                        let sg = kernels::sigmoid(row[half + c]);
                        ga[r * width + c] += d * sg;
                        ga[r * width + half + c] += d * row[c] * sg * (1.0 - sg);
                    }
                }
            }
            Op::DepthwiseConv { x, w, b } => {
                let (t_len, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.wants(*b) {
                    let gb = accumulate(grads, *b, c);
                    for grow in g.chunks_exact(c) {
                        add_into(gb, grow);
                    }
                }
                if self.wants(*w) {
                    let gw = accumulate(grads, *w, c * k);
                    for t in 0..t_len {
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                            for ch in 0..c {
                                gw[ch * k + j] += g[t * c + ch] * xv[s * c + ch];
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(grads, *x, t_len * c);
                    for t in 0..t_len {
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                            for ch in 0..c {
                                gx[s * c + ch] += g[t * c + ch] * wv[ch * k + j];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { a, argmax } => {
                let ga = accumulate(grads, *a, self.value(*a).numel());
                for (s, &idx) in g.iter().zip(argmax) {
                    ga[idx] += s;
                }
            }
            Op::Dropout { a, mask } => {
                let ga = accumulate(grads, *a, g.len());
                for ((d, s), m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                for d in accumulate(grads, *a, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let s = g[0] / n as f64;
                for d in accumulate(grads, *a, n).iter_mut() {
                    *d += s;
                }
            }
            Op::External { a, grad } => {
                let ga = accumulate(grads, *a, grad.len());
                for (d, s) in ga.iter_mut().zip(grad) {
                    *d += g[0] * s;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
