use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::{Error, Result, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive operations the tape can record.
///
/// Every op except [`Op::BatchNormBackward`] has a vector-Jacobian rule built
/// from other ops on this list, so gradients are themselves differentiable.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `a / b`, defined as `0` wherever `b == 0`.
    Div,
    Scale(f64),
    AddScalar(f64),
    Square,
    /// Square root; its derivative at exactly zero is taken as zero.
    Sqrt,
    Exp,
    Tanh,
    Relu,
    LeakyRelu(f64),
    /// Piecewise-constant slope mask: `1` where `x > 0`, `neg_slope` elsewhere. Zero derivative.
    Step { neg_slope: f64 },
    Sum,
    /// Broadcast a one-element tensor to `shape`.
    Fill { shape: Vec<usize> },
    SumPerSample,
    BroadcastPerSample { shape: Vec<usize> },
    SumPerChannel,
    BroadcastPerChannel { shape: Vec<usize> },
    SumBatch,
    BroadcastBatch { n: usize },
    SpatialSum,
    SpatialBroadcast { shape: Vec<usize> },
    /// 1x1 linear combination over channels; also serves as the dense layer for rank-2 inputs.
    ChannelCombine { transpose: bool },
    ChannelOuter,
    Conv2d(ConvGeom),
    Conv2dInputGrad { geom: ConvGeom, in_hw: (usize, usize) },
    Conv2dWeightGrad { geom: ConvGeom, kernel: usize },
    UpsampleNearest,
    AvgPool2,
    UpsampleBilinear,
    BilinearAdjoint,
    Reshape { shape: Vec<usize> },
    LogSoftmax,
    /// Per-sample L2 norm, `(N, ...) -> (N)`.
    SampleNorm,
    BatchNorm { eps: f64 },
    /// First-order only: differentiating through it is an error.
    BatchNormBackward { eps: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Step { .. } => "step",
            Op::Sum => "sum",
            Op::Fill { .. } => "fill",
            Op::SumPerSample => "sum_per_sample",
            Op::BroadcastPerSample { .. } => "broadcast_per_sample",
            Op::SumPerChannel => "sum_per_channel",
            Op::BroadcastPerChannel { .. } => "broadcast_per_channel",
            Op::SumBatch => "sum_batch",
            Op::BroadcastBatch { .. } => "broadcast_batch",
            Op::SpatialSum => "spatial_sum",
            Op::SpatialBroadcast { .. } => "spatial_broadcast",
            Op::ChannelCombine { .. } => "channel_combine",
            Op::ChannelOuter => "channel_outer",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::UpsampleNearest => "upsample_nearest",
            Op::AvgPool2 => "avg_pool",
            Op::UpsampleBilinear => "upsample_bilinear",
            Op::BilinearAdjoint => "bilinear_adjoint",
            Op::Reshape { .. } => "reshape",
            Op::LogSoftmax => "log_softmax",
            Op::SampleNorm => "sample_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormBackward { .. } => "batch_norm_backward",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::ChannelCombine { .. }
            | Op::ChannelOuter
            | Op::Conv2d(_)
            | Op::Conv2dInputGrad { .. }
            | Op::Conv2dWeightGrad { .. }
            | Op::BatchNormBackward { .. } => 2,
            _ => 1,
        }
    }

    /// Compute the op's output from its input values.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.arity() {
            return Err(Error::Shape(format!(
                "{} expects {} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        let a = || inputs[0];
        let b = || inputs[1];
        match self {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::Add => a().zip_map(b(), |x, y| x + y),
            Op::Sub => a().zip_map(b(), |x, y| x - y),
            Op::Mul => a().zip_map(b(), |x, y| x * y),
            Op::Div => a().zip_map(b(), |x, y| if y == 0.0 { 0.0 } else { x / y }),
            Op::Scale(s) => Ok(a().map(|x| x * s)),
            Op::AddScalar(s) => Ok(a().map(|x| x + s)),
            Op::Square => Ok(a().map(|x| x * x)),
            Op::Sqrt => Ok(a().map(f64::sqrt)),
            Op::Exp => Ok(a().map(f64::exp)),
            Op::Tanh => Ok(a().map(f64::tanh)),
            Op::Relu => Ok(a().map(|x| if x > 0.0 { x } else { 0.0 })),
            Op::LeakyRelu(alpha) => Ok(a().map(|x| if x > 0.0 { x } else { alpha * x })),
            Op::Step { neg_slope } => Ok(a().map(|x| if x > 0.0 { 1.0 } else { *neg_slope })),
            Op::Sum => Ok(Tensor::scalar(a().sum())),
            Op::Fill { shape } => {
                let v = a().item()?;
                Ok(Tensor::full(shape, v))
            }
            Op::SumPerSample => kernels::sum_per_sample(a()),
            Op::BroadcastPerSample { shape } => kernels::broadcast_per_sample(a(), shape),
            Op::SumPerChannel => kernels::sum_per_channel(a()),
            Op::BroadcastPerChannel { shape } => kernels::broadcast_per_channel(a(), shape),
            Op::SumBatch => kernels::sum_batch(a()),
            Op::BroadcastBatch { n } => Ok(kernels::broadcast_batch(a(), *n)),
            Op::SpatialSum => kernels::spatial_sum(a()),
            Op::SpatialBroadcast { shape } => kernels::spatial_broadcast(a(), shape),
            Op::ChannelCombine { transpose } => kernels::channel_combine(a(), b(), *transpose),
            Op::ChannelOuter => kernels::channel_outer(a(), b()),
            Op::Conv2d(g) => kernels::conv2d(a(), b(), *g),
            Op::Conv2dInputGrad { geom, in_hw } => {
                kernels::conv2d_input_grad(a(), b(), *geom, *in_hw)
            }
            Op::Conv2dWeightGrad { geom, kernel } => {
                kernels::conv2d_weight_grad(a(), b(), *geom, *kernel)
            }
            Op::UpsampleNearest => kernels::upsample_nearest(a()),
            Op::AvgPool2 => kernels::avg_pool2(a()),
            Op::UpsampleBilinear => kernels::upsample_bilinear(a()),
            Op::BilinearAdjoint => kernels::bilinear_adjoint(a()),
            Op::Reshape { shape } => a().clone().reshape(shape),
            Op::LogSoftmax => kernels::log_softmax(a()),
            Op::SampleNorm => kernels::sample_norm(a()),
            Op::BatchNorm { eps } => kernels::batch_norm(a(), *eps),
            Op::BatchNormBackward { eps } => kernels::batch_norm_backward(a(), b(), *eps),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor,
    pub(crate) name: Option<String>,
}

/// Recorded computation graph.
///
/// Ops are evaluated eagerly as they are recorded; [`Tape::evaluate`] replays
/// the whole recording with new values bound to named leaves. Gradients are
/// recorded onto the same tape, so they can be differentiated again.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    strict: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// In strict mode every recorded or replayed op must produce finite values.
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::default()
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.index()].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.index()].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.index()].inputs
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.nodes.len()
    }

    /// Look up a named leaf.
    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    fn push(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(node);
        id
    }

    /// Named leaf whose value can be rebound by [`Tape::evaluate`].
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            name: Some(name.clone()),
        });
        self.names.insert(name, id);
        Ok(id)
    }

    /// Anonymous leaf, fixed for the lifetime of the tape.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            name: None,
        })
    }

    /// Record `op` applied to `inputs`, computing its value immediately.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let index = self.nodes.len();
        for &i in inputs {
            if !self.contains(i) {
                return Err(Error::UnknownNode(i.index()));
            }
        }
        let args: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = op.forward(&args).map_err(|e| locate(e, index, &op))?;
        if self.strict && !value.all_finite() {
            return Err(Error::NonFinite {
                index,
                op: op.name(),
            });
        }
        Ok(self.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            name: None,
        }))
    }

    /// Replay every recorded op with new values for the named leaves in `bindings`.
    ///
    /// Leaves not mentioned keep their current values. Shapes may differ from
    /// the recording as long as every op still accepts them.
    pub fn evaluate(&mut self, bindings: &[(&str, Tensor)]) -> Result<()> {
        for (name, value) in bindings {
            let id = self
                .named(name)
                .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
            self.nodes[id.index()].value = value.clone();
        }
        for index in 0..self.nodes.len() {
            if self.nodes[index].op == Op::Leaf {
                continue;
            }
            let node = &self.nodes[index];
            let args: Vec<&Tensor> = node.inputs.iter().map(|&i| self.value(i)).collect();
            let value = node.op.forward(&args).map_err(|e| locate(e, index, &node.op))?;
            if self.strict && !value.all_finite() {
                return Err(Error::NonFinite {
                    index,
                    op: node.op.name(),
                });
            }
            self.nodes[index].value = value;
        }
        Ok(())
    }

    /// [`Tape::evaluate`], then return the values of `outputs`.
    pub fn evaluate_outputs(
        &mut self,
        bindings: &[(&str, Tensor)],
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        self.evaluate(bindings)?;
        outputs
            .iter()
            .map(|&o| {
                if self.contains(o) {
                    Ok(self.value(o).clone())
                } else {
                    Err(Error::UnknownNode(o.index()))
                }
            })
            .collect()
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.index()].name.as_deref()
    }

    // Convenience recorders. Each is a thin wrapper over `apply`.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Op::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(s), &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.apply(Op::LeakyRelu(alpha), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }
    pub fn sum_per_sample(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumPerSample, &[a])
    }
    pub fn broadcast_per_sample(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::BroadcastPerSample { shape: shape.to_vec() }, &[a])
    }
    pub fn sum_per_channel(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumPerChannel, &[a])
    }
    pub fn broadcast_per_channel(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::BroadcastPerChannel { shape: shape.to_vec() }, &[a])
    }
    pub fn broadcast_batch(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.apply(Op::BroadcastBatch { n }, &[a])
    }
    pub fn spatial_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, _, p) = kernels::ncp(self.shape(a))?;
        let s = self.apply(Op::SpatialSum, &[a])?;
        self.scale(s, 1.0 / p as f64)
    }
    /// Dense layer: `x (N, in)` times `w (out, in)` transposed.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.channel_combine(x, w)
    }
    pub fn channel_combine(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(Op::ChannelCombine { transpose: false }, &[x, w])
    }
    /// `x + b` with `b` broadcast over batch and positions.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast_per_channel(b, &shape)?;
        self.add(x, bb)
    }
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d(ConvGeom { stride, pad }), &[x, k])
    }
    pub fn upsample_nearest(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::UpsampleNearest, &[x])
    }
    pub fn upsample_bilinear(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::UpsampleBilinear, &[x])
    }
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::AvgPool2, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSoftmax, &[x])
    }
    pub fn sample_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::SampleNorm, &[x])
    }
    pub fn batch_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::BatchNorm { eps }, &[x])
    }
}

fn locate(e: Error, index: usize, op: &Op) -> Error {
    match e {
        Error::Shape(detail) => Error::OpShape {
            index,
            op: op.name(),
            detail,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::vector(&[-1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::vector(&[1.0, 2.0, 3.0])).unwrap();
        let sq = tape.square(x).unwrap();
        let y = tape.sum(sq).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 14.0);
    }

    #[test]
    fn evaluate_rebinds_named_inputs() {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::vector(&[1.0, 2.0])).unwrap();
        let sq = tape.square(x).unwrap();
        let y = tape.sum(sq).unwrap();
        let out = tape
            .evaluate_outputs(&[("x", Tensor::vector(&[3.0, 4.0]))], &[y])
            .unwrap();
        assert_eq!(out[0].item().unwrap(), 25.0);
        assert!(matches!(
            tape.evaluate(&[("nope", Tensor::scalar(0.0))]),
            Err(Error::UnknownInput(_))
        ));
    }

    #[test]
    fn shape_mismatch_reports_op_index() {
        let mut tape = Tape::new();
        let a = tape.input("a", Tensor::zeros(&[2])).unwrap();
        let b = tape.input("b", Tensor::zeros(&[2])).unwrap();
        let s = tape.add(a, b).unwrap();
        let _ = tape.sum(s).unwrap();
        let err = tape.evaluate(&[("a", Tensor::zeros(&[3]))]).unwrap_err();
        match err {
            Error::OpShape { index, op, .. } => {
                assert_eq!(index, s.index());
                assert_eq!(op, "add");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn strict_mode_flags_non_finite() {
        let mut tape = Tape::strict();
        let x = tape.input("x", Tensor::vector(&[800.0])).unwrap();
        let err = tape.exp(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, op: "exp" }));
    }

    #[test]
    fn duplicate_input_names_rejected() {
        let mut tape = Tape::new();
        tape.input("x", Tensor::scalar(1.0)).unwrap();
        assert!(tape.input("x", Tensor::scalar(2.0)).is_err());
    }
}
