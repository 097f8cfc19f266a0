use super::element::{gemm, Element, MatRef};
use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{shape_err, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and produce updated running statistics.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the previous running value: `running = momentum·running + (1 − momentum)·batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

/// Per-channel running mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![E::ZERO; channels],
            var: vec![E::ONE; channels],
        }
    }
}

enum Op<E> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        geom: PoolGeometry,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<E>,
        inv_std: Vec<E>,
        batch_stats: bool,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<E>,
        eps: E,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: E,
    },
    Sum {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Column {
        input: Var,
        index: usize,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Single-writer record of primitive applications.
///
/// Nodes are appended in execution order, so the node list is already
/// topologically sorted and backward is a reverse sweep.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    backward_done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Log clamp used by [`Tape::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn grad(&self, var: Var) -> Option<&Tensor<E>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    fn check(&self, var: Var) -> Result<(), TensorError> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(var.0))
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Result<Var, TensorError> {
        value.validate_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(kernel)?;
        let geom = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [geom.out_channels] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} != [{}]", self.value(b).shape(), geom.out_channels),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.output_shape(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        self.check(input)?;
        let geom = PoolGeometry::new("max_pool2d", self.value(input).shape(), window, stride, padding)?;
        let (out, argmax) = kernels::max_pool_forward(&geom, self.value(input).data());
        let value = Tensor::new(geom.output_shape(), out)?;
        self.push("max_pool2d", value, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        self.check(input)?;
        let geom = PoolGeometry::new("avg_pool2d", self.value(input).shape(), window, stride, padding)?;
        let out = kernels::avg_pool_forward(&geom, self.value(input).data());
        let value = Tensor::new(geom.output_shape(), out)?;
        self.push("avg_pool2d", value, Op::AvgPool2d { input, geom }, &[input])
    }

    /// `[N, C, H, W] → [N, C]` channel means.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let shape = self.value(input).shape();
        let &[n, c, h, w] = shape else {
            return Err(shape_err(
                "global_avg_pool",
                format!("expected [N,C,H,W], got {shape:?}"),
            ));
        };
        let plane = h * w;
        let scale = E::from_f64(1.0 / plane as f64);
        let out: Vec<E> = self
            .value(input)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<E>() * scale)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { input }, &[input])
    }

    /// `[N, F] · [F, G] + [G]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(weight)?;
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        let (&[n, f], &[wf, g]) = (xs, ws) else {
            return Err(shape_err(
                "dense",
                format!("expected [N,F] and [F,G], got {xs:?} and {ws:?}"),
            ));
        };
        if f != wf {
            return Err(shape_err("dense", format!("inner extents differ: {f} vs {wf}")));
        }
        let mut out = vec![E::ZERO; n * g];
        if let Some(b) = bias {
            self.check(b)?;
            let bv = self.value(b);
            if bv.shape() != [g] {
                return Err(shape_err("dense", format!("bias shape {:?} != [{g}]", bv.shape())));
            }
            for row in out.chunks_exact_mut(g) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            n,
            f,
            g,
            MatRef::rows(self.value(input).data(), f),
            MatRef::rows(self.value(weight).data(), g),
            if bias.is_some() { E::ONE } else { E::ZERO },
            &mut out,
        );
        let value = Tensor::new(vec![n, g], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("dense", value, Op::Dense { input, weight, bias }, &inputs)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let value = self.value(input).map(|v| if v > E::ZERO { v } else { E::ZERO });
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    /// Softmax over the last axis of a `[N, G]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let shape = self.value(input).shape().to_vec();
        let &[_, g] = shape.as_slice() else {
            return Err(shape_err("softmax", format!("expected [N,G], got {shape:?}")));
        };
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_exact_mut(g) {
            let m = row.iter().copied().fold(E::NEG_INFINITY, E::max);
            let mut total = E::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { input }, &[input])
    }

    /// Batch normalization over `[N, C]` or `[N, C, H, W]` inputs.
    ///
    /// In [`BatchNormMode::Train`] the batch statistics normalize the input
    /// and the updated running statistics are returned; in
    /// [`BatchNormMode::Eval`] `stats` is used as-is and nothing is returned.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<E>,
        mode: BatchNormMode,
        config: BatchNormConfig,
    ) -> Result<(Var, Option<RunningStats<E>>), TensorError> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let shape = self.value(input).shape().to_vec();
        let (n, c, plane) = match *shape.as_slice() {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => {
                return Err(shape_err(
                    "batch_norm",
                    format!("expected [N,C] or [N,C,H,W], got {shape:?}"),
                ))
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} shape {:?} != [{c}]", self.value(v).shape()),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("running statistics do not cover {c} channels"),
            ));
        }
        let x = self.value(input).data();
        let count = (n * plane) as f64;
        let (mean, var): (Vec<E>, Vec<E>) = match mode {
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
            BatchNormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let chunk = &x[(s * c + ch) * plane..][..plane];
                        mean[ch] += chunk.iter().map(|v| v.to_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for ch in 0..c {
                        let chunk = &x[(s * c + ch) * plane..][..plane];
                        var[ch] += chunk.iter().map(|v| (v.to_f64() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (
                    mean.into_iter().map(E::from_f64).collect(),
                    var.into_iter().map(E::from_f64).collect(),
                )
            }
        };
        let eps = E::from_f64(config.eps);
        let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![E::ZERO; x.len()];
        let mut out = vec![E::ZERO; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = xh * g[ch] + b[ch];
                }
            }
        }
        let updated = (mode == BatchNormMode::Train).then(|| {
            let m = E::from_f64(config.momentum);
            let rest = E::ONE - m;
            RunningStats {
                mean: stats
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &bm)| m * r + rest * bm)
                    .collect(),
                var: stats.var.iter().zip(&var).map(|(&r, &bv)| m * r + rest * bv).collect(),
            }
        });
        let value = Tensor::new(shape, out)?;
        let var_out = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: mode == BatchNormMode::Train,
            },
            &[input, gamma, beta],
        )?;
        Ok((var_out, updated))
    }

    /// Mean negative log-likelihood of one-hot `labels` under `probs`, with
    /// probabilities clamped at [`LOG_CLAMP`] before the log.
    pub fn cross_entropy(&mut self, probs: Var, labels: &Tensor<E>) -> Result<Var, TensorError> {
        self.check(probs)?;
        let shape = self.value(probs).shape();
        let &[n, g] = shape else {
            return Err(shape_err("cross_entropy", format!("expected [N,G], got {shape:?}")));
        };
        if labels.shape() != shape {
            return Err(shape_err(
                "cross_entropy",
                format!("labels shape {:?} != probabilities shape {shape:?}", labels.shape()),
            ));
        }
        for (row, l) in labels.data().chunks_exact(g).enumerate() {
            let ones = l.iter().filter(|&&v| v == E::ONE).count();
            let zeros = l.iter().filter(|&&v| v == E::ZERO).count();
            if ones != 1 || zeros != g - 1 {
                return Err(TensorError::InvalidLabels { row });
            }
        }
        let eps = E::from_f64(LOG_CLAMP);
        let p = self.value(probs).data();
        let mut total = 0.0f64;
        for (pv, lv) in p.iter().zip(labels.data()) {
            if *lv == E::ONE {
                total -= pv.max(eps).ln().to_f64();
            }
        }
        let value = Tensor::scalar(E::from_f64(total / n as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.data().to_vec(),
                eps,
            },
            &[probs],
        )
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", lhs, rhs, |a, b| a + b, |lhs, rhs| Op::Add { lhs, rhs })
    }

    /// Elementwise product.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", lhs, rhs, |a, b| a * b, |lhs, rhs| Op::Mul { lhs, rhs })
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        lhs: Var,
        rhs: Var,
        f: impl Fn(E, E) -> E,
        op: impl FnOnce(Var, Var) -> Op<E>,
    ) -> Result<Var, TensorError> {
        self.check(lhs)?;
        self.check(rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.push(name, value, op(lhs, rhs), &[lhs, rhs])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var, TensorError> {
        self.check(input)?;
        let factor = E::from_f64(factor);
        let value = self.value(input).map(|v| v * factor);
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let total = self.value(input).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { input }, &[input])
    }

    /// Concatenation along axis 1; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = inputs.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.value(first).shape().to_vec();
        if base.len() < 2 {
            return Err(shape_err("concat", format!("need rank >= 2, got {base:?}")));
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let mut channels = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len() || s[0] != n || s[2..] != base[2..] {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?}")));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[s * chunk..(s + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.check(input)?;
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { input }, &[input])
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let shape = self.value(input).shape();
        if shape.is_empty() {
            return Err(shape_err("flatten", "cannot flatten a scalar"));
        }
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(input, vec![n, rest])
    }

    /// Column `index` of a `[N, G]` tensor, as shape `[N]`.
    pub fn column(&mut self, input: Var, index: usize) -> Result<Var, TensorError> {
        self.check(input)?;
        let shape = self.value(input).shape();
        let &[n, g] = shape else {
            return Err(shape_err("column", format!("expected [N,G], got {shape:?}")));
        };
        if index >= g {
            return Err(shape_err(
                "column",
                format!("index {index} out of range for {g} columns"),
            ));
        }
        let data = self
            .value(input)
            .data()
            .iter()
            .skip(index)
            .step_by(g)
            .copied()
            .collect();
        let value = Tensor::new(vec![n], data)?;
        self.push("column", value, Op::Column { input, index }, &[input])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(&[1]).reshape(shape)?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.apply_rule(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Vec<E>) -> Result<(), TensorError> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, g)?),
        }
        Ok(())
    }

    fn apply_rule(&mut self, i: usize, grad: &Tensor<E>) -> Result<(), TensorError> {
        let dy = grad.data();
        // Rules compute input gradients from immutable node data first, then
        // accumulate; `updates` keeps the borrow checker out of the way.
        let mut updates: Vec<(Var, Vec<E>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    dy,
                    self.wants(*input),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                updates.extend(grads.input.map(|g| (*input, g)));
                updates.extend(grads.kernel.map(|g| (*kernel, g)));
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    updates.push((*b, g));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.wants(*input) {
                    let len = self.value(*input).numel();
                    updates.push((*input, kernels::max_pool_backward(len, argmax, dy)));
                }
            }
            Op::AvgPool2d { input, geom } => {
                if self.wants(*input) {
                    updates.push((*input, kernels::avg_pool_backward(geom, dy)));
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.wants(*input) {
                    let shape = self.value(*input).shape();
                    let plane = shape[2] * shape[3];
                    let scale = E::from_f64(1.0 / plane as f64);
                    let mut dx = Vec::with_capacity(dy.len() * plane);
                    for &g in dy {
                        dx.extend(std::iter::repeat_n(g * scale, plane));
                    }
                    updates.push((*input, dx));
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let g = w.shape()[1];
                if self.wants(*input) {
                    let mut dx = vec![E::ZERO; n * f];
                    gemm(
                        n,
                        g,
                        f,
                        MatRef::rows(dy, g),
                        MatRef::transposed(w.data(), g),
                        E::ZERO,
                        &mut dx,
                    );
                    updates.push((*input, dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![E::ZERO; f * g];
                    gemm(
                        f,
                        n,
                        g,
                        MatRef::transposed(x.data(), f),
                        MatRef::rows(dy, g),
                        E::ZERO,
                        &mut dw,
                    );
                    updates.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut db = vec![E::ZERO; g];
                    for row in dy.chunks_exact(g) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    updates.push((b, db));
                }
            }
            Op::Relu { input } => {
                if self.wants(*input) {
                    let y = node.value.data();
                    let dx = dy
                        .iter()
                        .zip(y)
                        .map(|(&g, &v)| if v > E::ZERO { g } else { E::ZERO })
                        .collect();
                    updates.push((*input, dx));
                }
            }
            Op::Softmax { input } => {
                if self.wants(*input) {
                    let y = node.value.data();
                    let g = node.value.shape()[1];
                    let mut dx = vec![E::ZERO; y.len()];
                    for ((yr, dyr), dxr) in y.chunks_exact(g).zip(dy.chunks_exact(g)).zip(dx.chunks_exact_mut(g)) {
                        let dot: E = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(dyr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    updates.push((*input, dx));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![E::ZERO; c];
                let mut sum_dy_xh = vec![E::ZERO; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += dy[i];
                            sum_dy_xh[ch] += dy[i] * normalized[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![E::ZERO; dy.len()];
                    let m = E::from_f64((n * plane) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *batch_stats {
                                    k * (dy[i] - sum_dy[ch] / m - normalized[i] * sum_dy_xh[ch] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    updates.push((*input, dx));
                }
                if self.wants(*gamma) {
                    updates.push((*gamma, sum_dy_xh));
                }
                if self.wants(*beta) {
                    updates.push((*beta, sum_dy));
                }
            }
            Op::CrossEntropy { probs, labels, eps } => {
                if self.wants(*probs) {
                    let p = self.value(*probs);
                    let n = E::from_f64(p.shape()[0] as f64);
                    let g0 = dy[0];
                    let dx = p
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&pv, &lv)| {
                            if lv == E::ONE && pv > *eps {
                                -g0 / (pv * n)
                            } else {
                                E::ZERO
                            }
                        })
                        .collect();
                    updates.push((*probs, dx));
                }
            }
            Op::Add { lhs, rhs } => {
                for v in [*lhs, *rhs] {
                    if self.wants(v) {
                        updates.push((v, dy.to_vec()));
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                if self.wants(*lhs) {
                    updates.push((*lhs, dy.iter().zip(b).map(|(&g, &v)| g * v).collect()));
                }
                if self.wants(*rhs) {
                    updates.push((*rhs, dy.iter().zip(a).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::Scale { input, factor } => {
                if self.wants(*input) {
                    updates.push((*input, dy.iter().map(|&g| g * *factor).collect()));
                }
            }
            Op::Sum { input } => {
                if self.wants(*input) {
                    updates.push((*input, vec![dy[0]; self.value(*input).numel()]));
                }
            }
            Op::Concat { inputs } => {
                let n = node.value.shape()[0];
                let inner: usize = node.value.shape()[2..].iter().product();
                let total = node.value.shape()[1] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[1] * inner;
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(n * chunk);
                        for s in 0..n {
                            dx.extend_from_slice(&dy[s * total + offset..][..chunk]);
                        }
                        updates.push((v, dx));
                    }
                    offset += chunk;
                }
            }
            Op::Reshape { input } => {
                if self.wants(*input) {
                    updates.push((*input, dy.to_vec()));
                }
            }
            Op::Column { input, index } => {
                if self.wants(*input) {
                    let g = self.value(*input).shape()[1];
                    let mut dx = vec![E::ZERO; self.value(*input).numel()];
                    for (row, &v) in dy.iter().enumerate() {
                        dx[row * g + index] = v;
                    }
                    updates.push((*input, dx));
                }
            }
        }
        for (v, g) in updates {
            self.accumulate(v, g)?;
        }
        Ok(())
    }
}
