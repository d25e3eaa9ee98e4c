//! Static directed acyclic network graph with a reverse-mode backward pass.

use ndarray::{Array1, ArrayView1, ArrayView4, Axis, Ix1, Ix4};
use serde::{Deserialize, Serialize};

use super::ops::{self, Activation, BatchNormCache, Padding, Tensor};
use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Explicit zero padding, either fixed or the "correct pad" used before
/// stride-2 depthwise convolutions (depends on input parity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadSpec {
    Fixed {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    Correct {
        kernel: usize,
    },
}

impl PadSpec {
    pub fn uniform(p: usize) -> Self {
        PadSpec::Fixed {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    fn resolve(self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        match self {
            PadSpec::Fixed {
                top,
                bottom,
                left,
                right,
            } => (top, bottom, left, right),
            PadSpec::Correct { kernel } => {
                let half = kernel / 2;
                let adj_h = 1 - h % 2;
                let adj_w = 1 - w % 2;
                (half - adj_h, half, half - adj_w, half)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Conv {
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: (usize, usize),
        padding: Padding,
        depthwise: bool,
    },
    BatchNorm {
        gamma: Option<ParamId>,
        beta: Option<ParamId>,
        mean: ParamId,
        var: ParamId,
        eps: f64,
        momentum: f64,
    },
    Act(Activation),
    MaxPool {
        size: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    AvgPool {
        size: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    GlobalAvgPool,
    ZeroPad(PadSpec),
    Add,
    /// `inputs[0] * inputs[1]` with the second broadcast over space.
    ChannelScale,
    Concat,
    /// `inputs[0] + scale * inputs[1]`
    ScaledAdd {
        scale: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Everything a training-mode forward pass keeps for the backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    bn: Vec<Option<BatchNormCache<T>>>,
    output: NodeId,
}

impl<T> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.values[self.output.0]
    }
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node>,
    output: NodeId,
    out_channels: usize,
    pub params: ParamStore<T>,
}

fn view1<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> ArrayView1<'_, T> {
    store
        .value(id)
        .view()
        .into_dimensionality::<Ix1>()
        .expect("rank-1 parameter")
}

fn view4<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> ArrayView4<'_, T> {
    store
        .value(id)
        .view()
        .into_dimensionality::<Ix4>()
        .expect("rank-4 parameter")
}

fn owned1<T: Scalar>(store: &ParamStore<T>, id: Option<ParamId>) -> Option<Array1<T>> {
    id.map(|id| view1(store, id).to_owned())
}

impl<T: Scalar> Graph<T> {
    pub(crate) fn from_parts(nodes: Vec<Node>, output: NodeId, out_channels: usize, params: ParamStore<T>) -> Self {
        Self {
            nodes,
            output,
            out_channels,
            params,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Channel count of the output feature maps.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                last[inp.0] = i;
            }
        }
        last[self.output.0] = usize::MAX;
        last
    }

    /// Inference-mode forward pass; intermediate activations are released as
    /// soon as their last consumer has run.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.last_uses();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let out = if matches!(node.op, Op::Input) {
                x.as_standard_layout().into_owned()
            } else {
                let inputs: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|id| values[id.0].as_ref().expect("topological order"))
                    .collect();
                self.eval(node, &inputs)
                    .map_err(|e| annotate(e, &node.name))?
            };
            values[i] = Some(out);
            for inp in &node.inputs {
                if last[inp.0] == i {
                    values[inp.0] = None;
                }
            }
        }
        Ok(values[self.output.0].take().expect("output computed"))
    }

    fn eval(&self, node: &Node, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let p = &self.params;
        match &node.op {
            Op::Input => unreachable!("input handled by caller"),
            Op::Conv {
                kernel,
                bias,
                stride,
                padding,
                depthwise,
            } => {
                let b = bias.map(|b| view1(p, b));
                if *depthwise {
                    ops::depthwise_conv2d(inputs[0], view4(p, *kernel), b, *stride, *padding)
                } else {
                    ops::conv2d(inputs[0], view4(p, *kernel), b, *stride, *padding)
                }
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
                ..
            } => Ok(ops::batch_norm_infer(
                inputs[0],
                owned1(p, *gamma).as_ref(),
                owned1(p, *beta).as_ref(),
                &view1(p, *mean).to_owned(),
                &view1(p, *var).to_owned(),
                lit(*eps),
            )),
            other => self.eval_stateless(other, inputs),
        }
    }

    fn eval_stateless(&self, op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match op {
            Op::Act(a) => Ok(inputs[0].mapv(|v| a.apply(v))),
            Op::MaxPool {
                size,
                stride,
                padding,
            } => ops::max_pool(inputs[0], *size, *stride, *padding),
            Op::AvgPool {
                size,
                stride,
                padding,
            } => ops::avg_pool(inputs[0], *size, *stride, *padding),
            Op::GlobalAvgPool => Ok(ops::global_avg_pool(inputs[0])),
            Op::ZeroPad(spec) => {
                let (_, _, h, w) = inputs[0].dim();
                Ok(ops::zero_pad(inputs[0], spec.resolve(h, w)))
            }
            Op::Add => {
                let mut acc = inputs[0].clone();
                for other in &inputs[1..] {
                    if other.dim() != acc.dim() {
                        return Err(Error::Shape(format!(
                            "add of {:?} and {:?}",
                            acc.dim(),
                            other.dim()
                        )));
                    }
                    acc += *other;
                }
                Ok(acc)
            }
            Op::ChannelScale => ops::channel_scale(inputs[0], inputs[1]),
            Op::Concat => ops::concat_channels(inputs),
            Op::ScaledAdd { scale } => {
                if inputs[0].dim() != inputs[1].dim() {
                    return Err(Error::Shape(format!(
                        "scaled add of {:?} and {:?}",
                        inputs[0].dim(),
                        inputs[1].dim()
                    )));
                }
                let s = lit::<T>(*scale);
                let mut out = inputs[0].clone();
                out.zip_mut_with(inputs[1], |a, &b| *a += s * b);
                Ok(out)
            }
            Op::Input | Op::Conv { .. } | Op::BatchNorm { .. } => unreachable!(),
        }
    }

    /// Training-mode forward pass: batch norms normalize with batch statistics
    /// and fold them into their running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tape<T>> {
        let n = self.nodes.len();
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut bn = Vec::with_capacity(n);
        for i in 0..n {
            let node = &self.nodes[i];
            let (out, cache) = match &node.op {
                Op::Input => (x.as_standard_layout().into_owned(), None),
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    momentum,
                } => {
                    let input = &values[node.inputs[0].0];
                    let g = owned1(&self.params, *gamma);
                    let b = owned1(&self.params, *beta);
                    let (out, bmean, bvar, cache) = ops::batch_norm_train(input, g.as_ref(), b.as_ref(), lit(*eps));
                    let m = lit::<T>(*momentum);
                    let one_m = T::one() - m;
                    self.params
                        .value_mut(*mean)
                        .zip_mut_with(&bmean.into_dyn(), |r, &v| *r = *r * m + v * one_m);
                    self.params
                        .value_mut(*var)
                        .zip_mut_with(&bvar.into_dyn(), |r, &v| *r = *r * m + v * one_m);
                    (out, Some(cache))
                }
                _ => {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &values[id.0]).collect();
                    let out = self
                        .eval(node, &inputs)
                        .map_err(|e| annotate(e, &node.name))?;
                    (out, None)
                }
            };
            values.push(out);
            bn.push(cache);
        }
        Ok(Tape {
            values,
            bn,
            output: self.output,
        })
    }

    /// Accumulate parameter gradients for `d loss / d output = dy`.
    pub fn backward(&self, tape: &Tape<T>, dy: Tensor<T>, grads: &mut Grads<T>) -> Result<()> {
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        node_grads[self.output.0] = Some(dy);
        let p = &self.params;
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let x0 = node.inputs.first().map(|id| &tape.values[id.0]);
            let input_is_source = node
                .inputs
                .first()
                .is_some_and(|id| matches!(self.nodes[id.0].op, Op::Input));
            let mut push = |id: NodeId, grad: Tensor<T>| match &mut node_grads[id.0] {
                Some(acc) => *acc += &grad,
                slot @ None => *slot = Some(grad),
            };
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    kernel,
                    bias,
                    stride,
                    padding,
                    depthwise,
                } => {
                    let k = view4(p, *kernel);
                    let (dx, dk, db) = if *depthwise {
                        ops::depthwise_conv2d_backward(x0.unwrap(), k, &g, *stride, *padding, !input_is_source)?
                    } else {
                        ops::conv2d_backward(x0.unwrap(), k, &g, *stride, *padding, !input_is_source)?
                    };
                    grads.accumulate(*kernel, dk.into_dyn());
                    if let Some(b) = bias {
                        grads.accumulate(*b, db.into_dyn());
                    }
                    if let Some(dx) = dx {
                        push(node.inputs[0], dx);
                    }
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    var,
                    eps,
                    ..
                } => {
                    let gam = owned1(p, *gamma);
                    let (dx, dgamma, dbeta) = match &tape.bn[i] {
                        Some(cache) => ops::batch_norm_train_backward(&g, gam.as_ref(), cache),
                        None => {
                            // running statistics: a per-channel affine map
                            let v = view1(p, *var);
                            let e = lit::<T>(*eps);
                            let mut dx = g.clone();
                            for (ch, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
                                let s = gam.as_ref().map_or(T::one(), |gm| gm[ch]) / (v[ch] + e).sqrt();
                                plane.mapv_inplace(|d| d * s);
                            }
                            let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                            (dx, Array1::zeros(db.len()), db)
                        }
                    };
                    if let Some(id) = gamma {
                        grads.accumulate(*id, dgamma.into_dyn());
                    }
                    if let Some(id) = beta {
                        grads.accumulate(*id, dbeta.into_dyn());
                    }
                    push(node.inputs[0], dx);
                }
                Op::Act(a) => {
                    let mut dx = g;
                    dx.zip_mut_with(x0.unwrap(), |d, &x| *d *= a.derivative(x));
                    push(node.inputs[0], dx);
                }
                Op::MaxPool {
                    size,
                    stride,
                    padding,
                } => push(
                    node.inputs[0],
                    ops::max_pool_backward(x0.unwrap(), &g, *size, *stride, *padding)?,
                ),
                Op::AvgPool {
                    size,
                    stride,
                    padding,
                } => push(
                    node.inputs[0],
                    ops::avg_pool_backward(x0.unwrap().dim(), &g, *size, *stride, *padding)?,
                ),
                Op::GlobalAvgPool => push(node.inputs[0], ops::global_avg_pool_backward(x0.unwrap().dim(), &g)),
                Op::ZeroPad(spec) => {
                    let (_, _, h, w) = x0.unwrap().dim();
                    push(node.inputs[0], ops::zero_pad_backward(&g, spec.resolve(h, w)));
                }
                Op::Add => {
                    for id in &node.inputs {
                        push(*id, g.clone());
                    }
                }
                Op::ChannelScale => {
                    let s = &tape.values[node.inputs[1].0];
                    let (dx, ds) = ops::channel_scale_backward(x0.unwrap(), s, &g);
                    push(node.inputs[0], dx);
                    push(node.inputs[1], ds);
                }
                Op::Concat => {
                    let mut start = 0;
                    for id in &node.inputs {
                        let c = tape.values[id.0].dim().1;
                        let part = g
                            .slice(ndarray::s![.., start..start + c, .., ..])
                            .as_standard_layout()
                            .into_owned();
                        push(*id, part);
                        start += c;
                    }
                }
                Op::ScaledAdd { scale } => {
                    let s = lit::<T>(*scale);
                    push(node.inputs[1], g.mapv(|d| d * s));
                    push(node.inputs[0], g);
                }
            }
        }
        Ok(())
    }
}

fn annotate(err: Error, node: &str) -> Error {
    match err {
        Error::Shape(msg) => Error::Shape(format!("{node}: {msg}")),
        other => other,
    }
}
