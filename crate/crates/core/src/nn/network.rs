use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::tensor::{BatchNormConfig, BatchNormMode, Element, RunningStats, Tape, Tensor, Var};

/// Where a layer reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    MaxPool {
        window: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Relu,
    Softmax,
    Add,
    Concat,
    Flatten,
}

/// Coarse layer family used for graph audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerCategory {
    Conv,
    Dense,
    BatchNorm,
    Pool,
    Activation,
    Add,
    Concat,
    Flatten,
}

impl LayerKind {
    pub fn category(&self) -> LayerCategory {
        match self {
            LayerKind::Conv2d { .. } => LayerCategory::Conv,
            LayerKind::Dense { .. } => LayerCategory::Dense,
            LayerKind::BatchNorm { .. } => LayerCategory::BatchNorm,
            LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } | LayerKind::GlobalAvgPool => LayerCategory::Pool,
            LayerKind::Relu | LayerKind::Softmax => LayerCategory::Activation,
            LayerKind::Add => LayerCategory::Add,
            LayerKind::Concat => LayerCategory::Concat,
            LayerKind::Flatten => LayerCategory::Flatten,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct Layer<E> {
    name: String,
    kind: LayerKind,
    inputs: Vec<Source>,
    params: Vec<Param<E>>,
    running: Option<RunningStats<E>>,
    output_shape: Vec<usize>,
    trainable: bool,
}

impl<E: Element> Layer<E> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn inputs(&self) -> &[Source] {
        &self.inputs
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn running_stats(&self) -> Option<&RunningStats<E>> {
        self.running.as_ref()
    }

    pub fn running_stats_mut(&mut self) -> Option<&mut RunningStats<E>> {
        self.running.as_mut()
    }

    /// Per-sample output shape (no batch axis).
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameters followed by running-statistic buffers, as `(name, tensor)`.
    pub fn named_state(&self) -> Vec<(String, Tensor<E>)> {
        let mut out: Vec<_> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        if let Some(rs) = &self.running {
            let c = rs.mean.len();
            out.push((
                "running_mean".into(),
                Tensor::new(vec![c], rs.mean.clone()).expect("running mean shape"),
            ));
            out.push((
                "running_var".into(),
                Tensor::new(vec![c], rs.var.clone()).expect("running var shape"),
            ));
        }
        out
    }
}

/// Ordered computation graph: layers are stored in topological order and
/// the last layer is the network output.
#[derive(Clone, Debug)]
pub struct Network<E> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<E>>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub outputs: Vec<Var>,
    pub param_vars: Vec<Vec<Var>>,
    /// Leaf substituted for the captured layer's output, if any.
    pub captured: Option<Var>,
}

impl Forward {
    pub fn output(&self) -> Var {
        *self.outputs.last().expect("network has at least one layer")
    }
}

/// Gradients aligned with `Network::layers()[i].params()[j]`.
pub type ParamGrads<E> = Vec<Vec<Option<Tensor<E>>>>;

impl<E: Element> Network<E> {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<E>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<E>] {
        &mut self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<E>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<E>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.output_shape)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Indices of layers that own parameters, in topological order.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_parameterized())
            .collect()
    }

    pub fn count_category(&self, category: LayerCategory) -> usize {
        self.layers.iter().filter(|l| l.kind.category() == category).count()
    }

    pub(crate) fn set_trainable(&mut self, index: usize, trainable: bool) {
        self.layers[index].trainable = trainable;
    }

    /// Marks every parameterized layer trainable.
    pub fn unfreeze_all(&mut self) {
        for l in &mut self.layers {
            l.trainable = l.kind.is_parameterized();
        }
    }

    fn check_input(&self, tape: &Tape<E>, input: Var) -> Result<(), NnError> {
        let shape = tape.value(input).shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(NnError::InputShape {
                expected: self.input_shape.clone(),
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Training-mode pass. Trainable batch-norm layers normalize with batch
    /// statistics and update their running statistics; frozen ones behave
    /// as in inference. Only trainable parameters require gradients.
    pub fn forward_train(&mut self, tape: &mut Tape<E>, input: Var) -> Result<Forward, NnError> {
        self.check_input(tape, input)?;
        let mut updates = Vec::new();
        let fwd = self.run(tape, input, true, None, Some(&mut updates))?;
        for (i, stats) in updates {
            self.layers[i].running = Some(stats);
        }
        Ok(fwd)
    }

    /// Inference pass; no parameter requires a gradient. When `capture` names
    /// a layer index, that layer's output is replaced by a gradient-carrying
    /// leaf so callers can differentiate with respect to the activation.
    pub fn forward_eval(&self, tape: &mut Tape<E>, input: Var, capture: Option<usize>) -> Result<Forward, NnError> {
        self.check_input(tape, input)?;
        self.run(tape, input, false, capture, None)
    }

    /// Output probabilities for a batch `[N, C, H, W]` in inference mode.
    pub fn predict(&self, batch: Tensor<E>) -> Result<Tensor<E>, NnError> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch, false);
        let fwd = self.forward_eval(&mut tape, x, None)?;
        Ok(tape.value(fwd.output()).clone())
    }

    fn run(
        &self,
        tape: &mut Tape<E>,
        input: Var,
        train: bool,
        capture: Option<usize>,
        mut updates: Option<&mut Vec<(usize, RunningStats<E>)>>,
    ) -> Result<Forward, NnError> {
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut param_vars = Vec::with_capacity(self.layers.len());
        let mut captured = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<Var> = layer
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => input,
                    Source::Layer(j) => outputs[*j],
                })
                .collect();
            let grad_params = train && layer.trainable;
            let pv: Vec<Var> = layer
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), grad_params))
                .collect();
            let out = match &layer.kind {
                LayerKind::Conv2d { stride, padding, .. } => {
                    tape.conv2d(ins[0], pv[0], pv.get(1).copied(), *stride, *padding)?
                }
                LayerKind::Dense { .. } => tape.dense(ins[0], pv[0], Some(pv[1]))?,
                LayerKind::BatchNorm { momentum, eps, .. } => {
                    let stats = layer.running.as_ref().expect("batch norm layer owns running stats");
                    let mode = if grad_params {
                        BatchNormMode::Train
                    } else {
                        BatchNormMode::Eval
                    };
                    let cfg = BatchNormConfig {
                        momentum: *momentum,
                        eps: *eps,
                    };
                    let (y, upd) = tape.batch_norm(ins[0], pv[0], pv[1], stats, mode, cfg)?;
                    if let (Some(u), Some(list)) = (upd, updates.as_deref_mut()) {
                        list.push((i, u));
                    }
                    y
                }
                LayerKind::MaxPool {
                    window,
                    stride,
                    padding,
                } => tape.max_pool2d(ins[0], *window, *stride, *padding)?,
                LayerKind::AvgPool {
                    window,
                    stride,
                    padding,
                } => tape.avg_pool2d(ins[0], *window, *stride, *padding)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(ins[0])?,
                LayerKind::Relu => tape.relu(ins[0])?,
                LayerKind::Softmax => tape.softmax(ins[0])?,
                LayerKind::Add => tape.add(ins[0], ins[1])?,
                LayerKind::Concat => tape.concat(&ins)?,
                LayerKind::Flatten => tape.flatten(ins[0])?,
            };
            let out = if capture == Some(i) {
                let leaf = tape.leaf(tape.value(out).clone(), true);
                captured = Some(leaf);
                leaf
            } else {
                out
            };
            outputs.push(out);
            param_vars.push(pv);
        }
        Ok(Forward {
            outputs,
            param_vars,
            captured,
        })
    }

    /// Moves parameter gradients out of `tape`.
    pub fn take_grads(&self, tape: &mut Tape<E>, fwd: &Forward) -> ParamGrads<E> {
        fwd.param_vars
            .iter()
            .map(|vars| vars.iter().map(|v| tape.take_grad(*v)).collect())
            .collect()
    }
}

/// Incremental builder with shape inference and He-uniform initialization.
pub struct GraphBuilder<'r, E, R: Rng + ?Sized> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<E>>,
    names: HashSet<String>,
    rng: &'r mut R,
    bn_momentum: f64,
    bn_eps: f64,
}

impl<'r, E: Element, R: Rng + ?Sized> GraphBuilder<'r, E, R> {
    /// `input_shape` is per sample, e.g. `[3, H, W]`.
    pub fn new(input_shape: &[usize], rng: &'r mut R) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            names: HashSet::new(),
            rng,
            bn_momentum: BatchNormConfig::default().momentum,
            bn_eps: BatchNormConfig::default().eps,
        }
    }

    pub fn with_batch_norm(mut self, config: BatchNormConfig) -> Self {
        self.bn_momentum = config.momentum;
        self.bn_eps = config.eps;
        self
    }

    pub fn shape_of(&self, src: Source) -> &[usize] {
        match src {
            Source::Input => &self.input_shape,
            Source::Layer(i) => &self.layers[i].output_shape,
        }
    }

    pub fn last(&self) -> Source {
        if self.layers.is_empty() {
            Source::Input
        } else {
            Source::Layer(self.layers.len() - 1)
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn push(
        &mut self,
        name: &str,
        kind: LayerKind,
        inputs: Vec<Source>,
        params: Vec<Param<E>>,
        output_shape: Vec<usize>,
    ) -> Result<Source, NnError> {
        if !self.names.insert(name.to_string()) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        let running = match kind {
            LayerKind::BatchNorm { channels, .. } => Some(RunningStats::new(channels)),
            _ => None,
        };
        let trainable = kind.is_parameterized();
        self.layers.push(Layer {
            name: name.to_string(),
            kind,
            inputs,
            params,
            running,
            output_shape,
            trainable,
        });
        Ok(self.last())
    }

    fn spatial(&self, name: &str, src: Source) -> Result<(usize, usize, usize), NnError> {
        match *self.shape_of(src) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(build_err(name, format!("expected a [C,H,W] feature map, got {s:?}"))),
        }
    }

    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<E> {
        let limit = (6.0 / fan_in as f64).sqrt();
        Tensor::random_uniform(shape, -limit, limit, self.rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        src: Source,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Source, NnError> {
        let (c, h, w) = self.spatial(name, src)?;
        if stride == 0 || kernel_size == 0 || out_channels == 0 {
            return Err(build_err(name, "kernel, stride and channel count must be positive"));
        }
        if h + 2 * padding < kernel_size || w + 2 * padding < kernel_size {
            return Err(build_err(
                name,
                format!("kernel {kernel_size} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let oh = (h + 2 * padding - kernel_size) / stride + 1;
        let ow = (w + 2 * padding - kernel_size) / stride + 1;
        let fan_in = c * kernel_size * kernel_size;
        let mut params = vec![Param {
            name: "kernel".into(),
            value: self.he_uniform(&[out_channels, c, kernel_size, kernel_size], fan_in),
        }];
        if bias {
            params.push(Param {
                name: "bias".into(),
                value: Tensor::zeros(&[out_channels]),
            });
        }
        let kind = LayerKind::Conv2d {
            in_channels: c,
            out_channels,
            kernel_size,
            stride,
            padding,
            bias,
        };
        self.push(name, kind, vec![src], params, vec![out_channels, oh, ow])
    }

    pub fn batch_norm(&mut self, name: &str, src: Source) -> Result<Source, NnError> {
        let shape = self.shape_of(src).to_vec();
        let channels = *shape.first().ok_or_else(|| build_err(name, "empty input shape"))?;
        let params = vec![
            Param {
                name: "gamma".into(),
                value: Tensor::ones(&[channels]),
            },
            Param {
                name: "beta".into(),
                value: Tensor::zeros(&[channels]),
            },
        ];
        let kind = LayerKind::BatchNorm {
            channels,
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        };
        self.push(name, kind, vec![src], params, shape)
    }

    pub fn dense(&mut self, name: &str, src: Source, out_features: usize) -> Result<Source, NnError> {
        let &[in_features] = self.shape_of(src) else {
            return Err(build_err(
                name,
                format!("dense layer needs a flat input, got {:?}", self.shape_of(src)),
            ));
        };
        if out_features == 0 {
            return Err(build_err(name, "zero output features"));
        }
        let params = vec![
            Param {
                name: "weight".into(),
                value: self.he_uniform(&[in_features, out_features], in_features),
            },
            Param {
                name: "bias".into(),
                value: Tensor::zeros(&[out_features]),
            },
        ];
        let kind = LayerKind::Dense {
            in_features,
            out_features,
        };
        self.push(name, kind, vec![src], params, vec![out_features])
    }

    fn pool(
        &mut self,
        name: &str,
        src: Source,
        kind: LayerKind,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Source, NnError> {
        let (c, h, w) = self.spatial(name, src)?;
        if window == 0 || stride == 0 || padding >= window {
            return Err(build_err(name, "invalid pooling window/stride/padding"));
        }
        if h + 2 * padding < window || w + 2 * padding < window {
            return Err(build_err(name, format!("window {window} larger than input {h}x{w}")));
        }
        let oh = (h + 2 * padding - window) / stride + 1;
        let ow = (w + 2 * padding - window) / stride + 1;
        self.push(name, kind, vec![src], Vec::new(), vec![c, oh, ow])
    }

    pub fn max_pool(
        &mut self,
        name: &str,
        src: Source,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Source, NnError> {
        let kind = LayerKind::MaxPool {
            window,
            stride,
            padding,
        };
        self.pool(name, src, kind, window, stride, padding)
    }

    pub fn avg_pool(
        &mut self,
        name: &str,
        src: Source,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Source, NnError> {
        let kind = LayerKind::AvgPool {
            window,
            stride,
            padding,
        };
        self.pool(name, src, kind, window, stride, padding)
    }

    pub fn global_avg_pool(&mut self, name: &str, src: Source) -> Result<Source, NnError> {
        let (c, _, _) = self.spatial(name, src)?;
        self.push(name, LayerKind::GlobalAvgPool, vec![src], Vec::new(), vec![c])
    }

    pub fn relu(&mut self, name: &str, src: Source) -> Result<Source, NnError> {
        let shape = self.shape_of(src).to_vec();
        self.push(name, LayerKind::Relu, vec![src], Vec::new(), shape)
    }

    pub fn softmax(&mut self, name: &str, src: Source) -> Result<Source, NnError> {
        let shape = self.shape_of(src).to_vec();
        if shape.len() != 1 {
            return Err(build_err(name, format!("softmax needs a flat input, got {shape:?}")));
        }
        self.push(name, LayerKind::Softmax, vec![src], Vec::new(), shape)
    }

    pub fn add(&mut self, name: &str, lhs: Source, rhs: Source) -> Result<Source, NnError> {
        let (a, b) = (self.shape_of(lhs).to_vec(), self.shape_of(rhs).to_vec());
        if a != b {
            return Err(build_err(name, format!("cannot add {a:?} and {b:?}")));
        }
        self.push(name, LayerKind::Add, vec![lhs, rhs], Vec::new(), a)
    }

    pub fn concat(&mut self, name: &str, srcs: &[Source]) -> Result<Source, NnError> {
        let first = srcs.first().ok_or_else(|| build_err(name, "concat needs inputs"))?;
        let base = self.shape_of(*first).to_vec();
        let mut channels = 0;
        for s in srcs {
            let shape = self.shape_of(*s);
            if shape.len() != base.len() || shape.is_empty() || shape[1..] != base[1..] {
                return Err(build_err(name, format!("cannot concat {shape:?} with {base:?}")));
            }
            channels += shape[0];
        }
        let mut shape = base;
        shape[0] = channels;
        self.push(name, LayerKind::Concat, srcs.to_vec(), Vec::new(), shape)
    }

    pub fn flatten(&mut self, name: &str, src: Source) -> Result<Source, NnError> {
        let numel = self.shape_of(src).iter().product();
        self.push(name, LayerKind::Flatten, vec![src], Vec::new(), vec![numel])
    }

    pub fn finish(self) -> Result<Network<E>, NnError> {
        if self.layers.is_empty() {
            return Err(build_err("<network>", "no layers"));
        }
        Ok(Network {
            input_shape: self.input_shape,
            layers: self.layers,
        })
    }
}

fn build_err(layer: &str, detail: impl Into<String>) -> NnError {
    NnError::Build {
        layer: layer.to_string(),
        detail: detail.into(),
    }
}
