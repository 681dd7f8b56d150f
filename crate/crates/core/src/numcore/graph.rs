//! Tape-based reverse-mode differentiation over coarse tensor primitives.
//!
//! Every primitive appends one node to the tape at call time, so node order
//! is execution order and every input id is smaller than its consumer's id.
//! [`Graph::backward`] walks the tape once in reverse.

use std::collections::HashMap;

use rand::Rng;

use super::scalar::sigmoid;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Train-mode batch normalization statistics reported back to the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// LSTM gate parameters. Gate blocks along the `4H` axis are ordered
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[D, 4H]`
    pub input_weight: Var,
    /// `[H, 4H]`
    pub hidden_weight: Var,
    /// `[4H]`
    pub bias: Var,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d { x: Var, kernel: Var, bias: Var, stride: usize, pad_left: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Dense { x: Var, weight: Var, bias: Option<Var> },
    Softmax { x: Var },
    WeightedSum { weights: Var, values: Var },
    Reshape { x: Var },
    SelectStep { x: Var, step: usize },
    Stack { xs: Vec<Var> },
    ConcatLast { a: Var, b: Var },
    SliceLast { x: Var, start: usize },
    LstmCell { x: Var, h: Var, c: Var, vars: LstmVars, gates: Vec<T>, tanh_c: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Sum { x: Var },
    SumSquares { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// The tape: an append-only list of nodes.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_leaves: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf, optionally differentiable. Used by tests and small programs.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            op: Op::Leaf,
            value: p.value.clone(),
            requires_grad: p.kind.is_trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    /// 1-D convolution over `[L, C_in]` or `[B, L, C_in]` with a
    /// `[K, C_in, C_out]` kernel. Zero padding `(left, right)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, len, c_in) = match xs.as_slice() {
            [l, c] => (1, *l, *c),
            [b, l, c] => (*b, *l, *c),
            _ => return Err(Error::dim(format!("conv1d input must be rank 2 or 3, got {xs:?}"))),
        };
        let [k_len, k_in, c_out] = ks[..] else {
            return Err(Error::dim(format!("conv1d kernel must be [K, C_in, C_out], got {ks:?}")));
        };
        if k_in != c_in {
            return Err(Error::dim(format!("kernel expects {k_in} input channels, input has {c_in}")));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::dim(format!("conv1d bias must be [{c_out}]")));
        }
        if stride == 0 {
            return Err(Error::dim("conv1d stride must be >= 1"));
        }
        let (left, right) = padding;
        let padded = len + left + right;
        if k_len > padded {
            return Err(Error::dim(format!("kernel length {k_len} exceeds padded length {padded}")));
        }
        let out_len = (padded - k_len) / stride + 1;

        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![T::zero(); batch * out_len * c_out];
        for b in 0..batch {
            let xb = &xd[b * len * c_in..(b + 1) * len * c_in];
            for t in 0..out_len {
                let row = &mut out[(b * out_len + t) * c_out..(b * out_len + t + 1) * c_out];
                row.copy_from_slice(bd);
                for k in 0..k_len {
                    let pos = t * stride + k;
                    if pos < left || pos - left >= len {
                        continue;
                    }
                    let xrow = &xb[(pos - left) * c_in..(pos - left + 1) * c_in];
                    for (c, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let w = &kd[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                        for (o, &wv) in row.iter_mut().zip(w) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let shape = if xs.len() == 2 { vec![out_len, c_out] } else { vec![batch, out_len, c_out] };
        Ok(self.push(
            Op::Conv1d { x, kernel, bias, stride, pad_left: left },
            Tensor::from_parts(shape, out),
            &[x, kernel, bias],
        ))
    }

    /// Batch normalization over every axis but the last. In train mode the
    /// batch statistics (biased variance) are returned for the caller to fold
    /// into its running averages.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        train: bool,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps <= T::zero() {
            return Err(Error::Contract("batch-norm eps must be positive".into()));
        }
        let c = self.value(x).last_dim();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::dim(format!("batch-norm {name} must be [{c}]")));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(format!("batch-norm running stats must have {c} entries")));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / c;
        let (mean, var) = if train {
            let n = T::from_usize(rows).unwrap();
            let mut mean = vec![T::zero(); c];
            for r in 0..rows {
                for (m, &v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); c];
            for r in 0..rows {
                for ((s, &v), &m) in var.iter_mut().zip(&xd[r * c..(r + 1) * c]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            (mean, var)
        } else {
            if running_var.iter().any(|&v| v < T::zero()) {
                return Err(Error::Contract("batch-norm running variance is negative".into()));
            }
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                xhat[i] = (xd[i] - mean[j]) * inv_std[j];
                out[i] = gd[j] * xhat[i] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let stats = train.then_some(BatchStats { mean, var });
        let v = self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, value, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh { x }, value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, value, &[x])
    }

    /// Inverted dropout. Identity (no node recorded) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(Op::Dropout { x, mask }, value, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(Op::Add { a, b }, value, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(Op::Mul { a, b }, value, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Affine map over the trailing axis: `x[.., D_in] · W[D_in, D_out] + b`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let d_in = self.value(x).last_dim();
        let ws = self.shape(weight).to_vec();
        let [w_in, d_out] = ws[..] else {
            return Err(Error::dim(format!("dense weight must be rank 2, got {ws:?}")));
        };
        if w_in != d_in {
            return Err(Error::dim(format!("dense expects trailing dim {w_in}, input has {d_in}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(Error::dim(format!("dense bias must be [{d_out}]")));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let rows = xd.len() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(bd);
            }
        }
        matmul_acc(xd, wd, &mut out, rows, d_in, d_out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = d_out;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Dense { x, weight, bias }, Tensor::from_parts(shape, out), &inputs))
    }

    /// Max-shifted softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(Op::Softmax { x }, value, &[x])
    }

    /// `weights[G, n]`, `values[G, n, D]` → `Σ_i weights[g, i] · values[g, i, :]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        let vs = self.shape(values).to_vec();
        let ([g, n], [g2, n2, d]) = (&ws[..], &vs[..]) else {
            return Err(Error::dim(format!("weighted_sum expects [G, n] and [G, n, D], got {ws:?}, {vs:?}")));
        };
        if g != g2 || n != n2 {
            return Err(Error::dim(format!("weighted_sum shapes {ws:?} and {vs:?} disagree")));
        }
        let (g, n, d) = (*g, *n, *d);
        let wd = self.value(weights).data();
        let vd = self.value(values).data();
        let mut out = vec![T::zero(); g * d];
        for gi in 0..g {
            let o = &mut out[gi * d..(gi + 1) * d];
            for i in 0..n {
                let a = wd[gi * n + i];
                let row = &vd[(gi * n + i) * d..(gi * n + i + 1) * d];
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += a * v;
                }
            }
        }
        Ok(self.push(
            Op::WeightedSum { weights, values },
            Tensor::from_parts(vec![g, d], out),
            &[weights, values],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, value, &[x]))
    }

    /// Slice `x[:, step, :]` out of a `[S, N, D]` sequence tensor.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [s, n, d] = xs[..] else {
            return Err(Error::dim(format!("select_step expects [S, N, D], got {xs:?}")));
        };
        if step >= n {
            return Err(Error::dim(format!("step {step} out of range for length {n}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(s * d);
        for si in 0..s {
            out.extend_from_slice(&xd[(si * n + step) * d..(si * n + step + 1) * d]);
        }
        Ok(self.push(Op::SelectStep { x, step }, Tensor::from_parts(vec![s, d], out), &[x]))
    }

    /// Stack `N` tensors of shape `[S, D]` into `[S, N, D]`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("stack of zero tensors"))?;
        let shape = self.shape(*first).to_vec();
        let [s, d] = shape[..] else {
            return Err(Error::dim(format!("stack expects [S, D] parts, got {shape:?}")));
        };
        if xs.iter().any(|v| self.shape(*v) != shape.as_slice()) {
            return Err(Error::dim("stack parts differ in shape"));
        }
        let n = xs.len();
        let mut out = vec![T::zero(); s * n * d];
        for (k, v) in xs.iter().enumerate() {
            let vd = self.value(*v).data();
            for si in 0..s {
                out[(si * n + k) * d..(si * n + k + 1) * d].copy_from_slice(&vd[si * d..(si + 1) * d]);
            }
        }
        Ok(self.push(Op::Stack { xs: xs.to_vec() }, Tensor::from_parts(vec![s, n, d], out), xs))
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(format!("concat_last: {sa:?} vs {sb:?}")));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).len() / da;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        Ok(self.push(Op::ConcatLast { a, b }, Tensor::from_parts(shape, out), &[a, b]))
    }

    /// `x[.., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(x).last_dim();
        if len == 0 || start + len > d {
            return Err(Error::dim(format!("slice {start}..{} out of range for {d}", start + len)));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Op::SliceLast { x, start }, Tensor::from_parts(shape, out), &[x]))
    }

    /// One LSTM step over a batch: `x[S, D]`, `h[S, H]`, `c[S, H]`.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, vars: LstmVars) -> Result<(Var, Var)> {
        let xs = self.shape(x).to_vec();
        let [s, d] = xs[..] else {
            return Err(Error::dim(format!("lstm input must be [S, D], got {xs:?}")));
        };
        let hs = self.shape(h).to_vec();
        let [s_h, hidden] = hs[..] else {
            return Err(Error::dim(format!("lstm hidden state must be [S, H], got {hs:?}")));
        };
        if s_h != s || self.shape(c) != hs.as_slice() {
            return Err(Error::dim("lstm state shapes disagree with input batch"));
        }
        let g4 = 4 * hidden;
        if self.shape(vars.input_weight) != [d, g4]
            || self.shape(vars.hidden_weight) != [hidden, g4]
            || self.shape(vars.bias) != [g4]
        {
            return Err(Error::dim(format!("lstm parameters inconsistent with D={d}, H={hidden}")));
        }
        let mut z = Vec::with_capacity(s * g4);
        let bd = self.value(vars.bias).data();
        for _ in 0..s {
            z.extend_from_slice(bd);
        }
        matmul_acc(self.value(x).data(), self.value(vars.input_weight).data(), &mut z, s, d, g4);
        matmul_acc(self.value(h).data(), self.value(vars.hidden_weight).data(), &mut z, s, hidden, g4);

        let cd = self.value(c).data();
        let mut gates = z;
        let mut tanh_c = vec![T::zero(); s * hidden];
        let mut out = vec![T::zero(); s * 2 * hidden];
        for si in 0..s {
            let g = &mut gates[si * g4..(si + 1) * g4];
            for j in 0..hidden {
                g[j] = sigmoid(g[j]);
                g[hidden + j] = sigmoid(g[hidden + j]);
                g[2 * hidden + j] = g[2 * hidden + j].tanh();
                g[3 * hidden + j] = sigmoid(g[3 * hidden + j]);
                let c_new = g[hidden + j] * cd[si * hidden + j] + g[j] * g[2 * hidden + j];
                let tc = c_new.tanh();
                tanh_c[si * hidden + j] = tc;
                out[si * 2 * hidden + j] = g[3 * hidden + j] * tc;
                out[si * 2 * hidden + hidden + j] = c_new;
            }
        }
        let cell = self.push(
            Op::LstmCell { x, h, c, vars, gates, tanh_c },
            Tensor::from_parts(vec![s, 2 * hidden], out),
            &[x, h, c, vars.input_weight, vars.hidden_weight, vars.bias],
        );
        let h_new = self.slice_last(cell, 0, hidden)?;
        let c_new = self.slice_last(cell, hidden, hidden)?;
        Ok((h_new, c_new))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// in the overflow-free form `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::dim(format!(
                "{} logits but {} targets",
                z.len(),
                targets.len()
            )));
        }
        if targets.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::input("targets must be 0 or 1"));
        }
        let total: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let mean = total / T::from_usize(z.len()).unwrap();
        Ok(self.push(
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            Tensor::scalar(mean),
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Op::SumSquares { x }, Tensor::scalar(s), &[x])
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        Ok(Gradients { grads, param_leaves: self.param_leaves.clone(), shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, kernel, bias, stride, pad_left } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (batch, len, c_in) = match xv.shape() {
                    [l, c] => (1, *l, *c),
                    [b, l, c] => (*b, *l, *c),
                    _ => unreachable!(),
                };
                let (k_len, c_out) = (kv.shape()[0], kv.shape()[2]);
                let out_len = node.value.len() / (batch * c_out);
                let (xd, kd) = (xv.data(), kv.data());
                if self.needs(*bias) {
                    let gb = slot(grads, *bias, c_out);
                    for row in g.chunks(c_out) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                if self.needs(*kernel) {
                    let gk = slot(grads, *kernel, kd.len());
                    for b in 0..batch {
                        for t in 0..out_len {
                            let grow = &g[(b * out_len + t) * c_out..(b * out_len + t + 1) * c_out];
                            for k in 0..k_len {
                                let pos = t * stride + k;
                                if pos < *pad_left || pos - pad_left >= len {
                                    continue;
                                }
                                let base = (b * len + pos - pad_left) * c_in;
                                for c in 0..c_in {
                                    let xv = xd[base + c];
                                    if xv == T::zero() {
                                        continue;
                                    }
                                    let dst = &mut gk[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                    for (a, &gv) in dst.iter_mut().zip(grow) {
                                        *a += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, xd.len());
                    for b in 0..batch {
                        for t in 0..out_len {
                            let grow = &g[(b * out_len + t) * c_out..(b * out_len + t + 1) * c_out];
                            for k in 0..k_len {
                                let pos = t * stride + k;
                                if pos < *pad_left || pos - pad_left >= len {
                                    continue;
                                }
                                let base = (b * len + pos - pad_left) * c_in;
                                for c in 0..c_in {
                                    let w = &kd[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                    gx[base + c] += dot(w, grow);
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        sum_g[j] += g[r * c + j];
                        sum_gx[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                if self.needs(*gamma) {
                    add_into(slot(grads, *gamma, c), &sum_gx);
                }
                if self.needs(*beta) {
                    add_into(slot(grads, *beta, c), &sum_g);
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, xhat.len());
                    if *train {
                        let n = T::from_usize(rows).unwrap();
                        for r in 0..rows {
                            for j in 0..c {
                                let i = r * c + j;
                                gx[i] += gd[j] * inv_std[j] / n
                                    * (n * g[i] - sum_g[j] - xhat[i] * sum_gx[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..c {
                                gx[r * c + j] += g[r * c + j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, xd.len());
                for ((a, &v), &gv) in gx.iter_mut().zip(xd).zip(g) {
                    if v > T::zero() {
                        *a += gv;
                    }
                }
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let gx = slot(grads, *x, y.len());
                for ((a, &yv), &gv) in gx.iter_mut().zip(y).zip(g) {
                    *a += gv * (T::one() - yv * yv);
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let gx = slot(grads, *x, y.len());
                for ((a, &yv), &gv) in gx.iter_mut().zip(y).zip(g) {
                    *a += gv * yv * (T::one() - yv);
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, mask.len());
                for ((a, &m), &gv) in gx.iter_mut().zip(mask).zip(g) {
                    *a += gv * m;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let gx = slot(grads, *x, g.len());
                for (a, &gv) in gx.iter_mut().zip(g) {
                    *a += gv * *factor;
                }
            }
            Op::Dense { x, weight, bias } => {
                let xd = self.value(*x).data();
                let wd = self.value(*weight).data();
                let (d_in, d_out) = (self.shape(*weight)[0], self.shape(*weight)[1]);
                let rows = xd.len() / d_in;
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = slot(grads, *b, d_out);
                        for row in g.chunks(d_out) {
                            add_into(gb, row);
                        }
                    }
                }
                if self.needs(*weight) {
                    let gw = slot(grads, *weight, wd.len());
                    for r in 0..rows {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        for i in 0..d_in {
                            let xv = xd[r * d_in + i];
                            if xv == T::zero() {
                                continue;
                            }
                            for (a, &gv) in gw[i * d_out..(i + 1) * d_out].iter_mut().zip(grow) {
                                *a += xv * gv;
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, xd.len());
                    for r in 0..rows {
                        let grow = &g[r * d_out..(r + 1) * d_out];
                        for i in 0..d_in {
                            gx[r * d_in + i] += dot(&wd[i * d_out..(i + 1) * d_out], grow);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let gx = slot(grads, *x, y.len());
                for ((grow, yrow), arow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(grow, yrow);
                    for i in 0..n {
                        arow[i] += yrow[i] * (grow[i] - s);
                    }
                }
            }
            Op::WeightedSum { weights, values } => {
                let (gn, n) = (self.shape(*weights)[0], self.shape(*weights)[1]);
                let d = self.shape(*values)[2];
                let wd = self.value(*weights).data();
                let vd = self.value(*values).data();
                if self.needs(*weights) {
                    let gw = slot(grads, *weights, wd.len());
                    for gi in 0..gn {
                        let grow = &g[gi * d..(gi + 1) * d];
                        for i in 0..n {
                            gw[gi * n + i] += dot(grow, &vd[(gi * n + i) * d..(gi * n + i + 1) * d]);
                        }
                    }
                }
                if self.needs(*values) {
                    let gv = slot(grads, *values, vd.len());
                    for gi in 0..gn {
                        let grow = &g[gi * d..(gi + 1) * d];
                        for i in 0..n {
                            let a = wd[gi * n + i];
                            for (dst, &gg) in gv[(gi * n + i) * d..(gi * n + i + 1) * d].iter_mut().zip(grow) {
                                *dst += a * gg;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => add_into(slot(grads, *x, g.len()), g),
            Op::SelectStep { x, step } => {
                let (s, n, d) = dims3(self.shape(*x));
                let gx = slot(grads, *x, s * n * d);
                for si in 0..s {
                    add_into(&mut gx[(si * n + step) * d..(si * n + step + 1) * d], &g[si * d..(si + 1) * d]);
                }
            }
            Op::Stack { xs } => {
                let (s, n, d) = dims3(node.value.shape());
                for (k, v) in xs.iter().enumerate() {
                    if !self.needs(*v) {
                        continue;
                    }
                    let gx = slot(grads, *v, s * d);
                    for si in 0..s {
                        add_into(&mut gx[si * d..(si + 1) * d], &g[(si * n + k) * d..(si * n + k + 1) * d]);
                    }
                }
            }
            Op::ConcatLast { a, b } => {
                let da = self.value(*a).last_dim();
                let db = self.value(*b).last_dim();
                let rows = g.len() / (da + db);
                if self.needs(*a) {
                    let ga = slot(grads, *a, rows * da);
                    for r in 0..rows {
                        add_into(&mut ga[r * da..(r + 1) * da], &g[r * (da + db)..r * (da + db) + da]);
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, rows * db);
                    for r in 0..rows {
                        add_into(&mut gb[r * db..(r + 1) * db], &g[r * (da + db) + da..(r + 1) * (da + db)]);
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let d = self.value(*x).last_dim();
                let len = node.value.last_dim();
                let rows = g.len() / len;
                let gx = slot(grads, *x, rows * d);
                for r in 0..rows {
                    add_into(&mut gx[r * d + start..r * d + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::LstmCell { x, h, c, vars, gates, tanh_c } => {
                let (s, hidden) = (self.shape(*h)[0], self.shape(*h)[1]);
                let d = self.shape(*x)[1];
                let g4 = 4 * hidden;
                let cd = self.value(*c).data();
                let mut dz = vec![T::zero(); s * g4];
                let mut dc_prev = vec![T::zero(); s * hidden];
                for si in 0..s {
                    let gt = &gates[si * g4..(si + 1) * g4];
                    for j in 0..hidden {
                        let (ig, fg, cg, og) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                        let tc = tanh_c[si * hidden + j];
                        let dh = g[si * 2 * hidden + j];
                        let dc = g[si * 2 * hidden + hidden + j] + dh * og * (T::one() - tc * tc);
                        let dz_row = &mut dz[si * g4..(si + 1) * g4];
                        dz_row[j] = dc * cg * ig * (T::one() - ig);
                        dz_row[hidden + j] = dc * cd[si * hidden + j] * fg * (T::one() - fg);
                        dz_row[2 * hidden + j] = dc * ig * (T::one() - cg * cg);
                        dz_row[3 * hidden + j] = dh * tc * og * (T::one() - og);
                        dc_prev[si * hidden + j] = dc * fg;
                    }
                }
                if self.needs(*c) {
                    add_into(slot(grads, *c, dc_prev.len()), &dc_prev);
                }
                if self.needs(vars.bias) {
                    let gb = slot(grads, vars.bias, g4);
                    for row in dz.chunks(g4) {
                        add_into(gb, row);
                    }
                }
                for (inp, w, width) in [(*x, vars.input_weight, d), (*h, vars.hidden_weight, hidden)] {
                    let id = self.value(inp).data();
                    let wd = self.value(w).data();
                    if self.needs(w) {
                        let gw = slot(grads, w, wd.len());
                        for si in 0..s {
                            let dzr = &dz[si * g4..(si + 1) * g4];
                            for i in 0..width {
                                let v = id[si * width + i];
                                for (a, &dv) in gw[i * g4..(i + 1) * g4].iter_mut().zip(dzr) {
                                    *a += v * dv;
                                }
                            }
                        }
                    }
                    if self.needs(inp) {
                        let gi = slot(grads, inp, s * width);
                        for si in 0..s {
                            let dzr = &dz[si * g4..(si + 1) * g4];
                            for i in 0..width {
                                gi[si * width + i] += dot(&wd[i * g4..(i + 1) * g4], dzr);
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::from_usize(z.len()).unwrap();
                let gz = slot(grads, *logits, z.len());
                for ((a, &zv), &y) in gz.iter_mut().zip(z).zip(targets) {
                    *a += (sigmoid(zv) - y) * scale;
                }
            }
            Op::Sum { x } => {
                let gx = slot(grads, *x, self.value(*x).len());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::SumSquares { x } => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, xd.len());
                let two = T::lit(2.0);
                for (a, &v) in gx.iter_mut().zip(xd) {
                    *a += two * v * g[0];
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_leaves: HashMap<ParamId, Var>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf; zero when the leaf is
    /// not on any path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient for a stored parameter; zero when the parameter was never
    /// placed on the tape.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        match self.param_leaves.get(&id) {
            Some(&v) => self.wrt(v),
            None => Tensor::zeros(store.value(id).shape()),
        }
    }

    /// All learnable-parameter gradients concatenated in store order.
    pub fn flatten_trainable(&self, store: &ParamStore<T>) -> Vec<T> {
        let mut out = Vec::with_capacity(store.num_trainable());
        for id in store.trainable_ids() {
            match self.param_leaves.get(&id).and_then(|v| self.grads[v.0].as_ref()) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), store.value(id).len())),
            }
        }
        out
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

/// `out[rows, n] += a[rows, k] · b[k, n]`.
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let orow = &mut out[r * n..(r + 1) * n];
        for i in 0..k {
            let av = a[r * k + i];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
