//! Layer-level construction of a [`Graph`].
//!
//! Parameter names follow `<layer>/<weight>` with the same layer names the
//! reference Keras applications use, including their auto-generated names
//! (`conv2d_7`, `batch_normalization_3`, ...) for unnamed layers, so that
//! externally converted weights can be matched by name.

use std::collections::HashMap;

use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Node, NodeId, Op, PadSpec};
use super::ops::{Activation, Padding};
use super::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
    /// Learn a per-channel multiplier (gamma).
    pub scale: bool,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            momentum: 0.99,
            scale: true,
        }
    }
}

pub struct GraphBuilder<'r, T> {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    params: ParamStore<T>,
    rng: &'r mut ChaCha8Rng,
    uids: HashMap<&'static str, usize>,
}

fn glorot_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array::from_shape_simple_fn(IxDyn(shape), || lit(rng.random_range(-limit..limit)))
}

impl<'r, T: Scalar> GraphBuilder<'r, T> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            channels: Vec::new(),
            params: ParamStore::new(),
            rng,
            uids: HashMap::new(),
        }
    }

    /// `prefix`, `prefix_1`, `prefix_2`, ... in call order.
    fn auto_name(&mut self, prefix: &'static str) -> String {
        let uid = self.uids.entry(prefix).or_insert(0);
        *uid += 1;
        if *uid == 1 {
            prefix.to_string()
        } else {
            format!("{prefix}_{}", *uid - 1)
        }
    }

    fn name_or(&mut self, name: Option<&str>, prefix: &'static str) -> String {
        match name {
            Some(n) => n.to_string(),
            None => self.auto_name(prefix),
        }
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { name, op, inputs });
        self.channels.push(channels);
        id
    }

    pub fn channels(&self, x: NodeId) -> usize {
        self.channels[x.0]
    }

    pub fn input(&mut self, channels: usize) -> NodeId {
        self.push("input".into(), Op::Input, vec![], channels)
    }

    fn weight(&mut self, name: String, value: ArrayD<T>) -> ParamId {
        self.params.insert(name, value, ParamRole::Weight)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        x: NodeId,
        name: Option<&str>,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        use_bias: bool,
    ) -> NodeId {
        let name = self.name_or(name, "conv2d");
        let cin = self.channels(x);
        let (kh, kw) = kernel;
        let k = glorot_uniform(self.rng, &[filters, cin, kh, kw], kh * kw * cin, kh * kw * filters);
        let kernel_id = self.weight(format!("{name}/kernel"), k);
        let bias = use_bias.then(|| self.weight(format!("{name}/bias"), ArrayD::zeros(IxDyn(&[filters]))));
        self.push(
            name,
            Op::Conv {
                kernel: kernel_id,
                bias,
                stride,
                padding,
                depthwise: false,
            },
            vec![x],
            filters,
        )
    }

    pub fn depthwise(
        &mut self,
        x: NodeId,
        name: Option<&str>,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        use_bias: bool,
    ) -> NodeId {
        let name = self.name_or(name, "depthwise_conv2d");
        self.depthwise_named(x, name.clone(), format!("{name}/kernel"), kernel, stride, padding, use_bias)
    }

    #[allow(clippy::too_many_arguments)]
    fn depthwise_named(
        &mut self,
        x: NodeId,
        node_name: String,
        kernel_name: String,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        use_bias: bool,
    ) -> NodeId {
        let c = self.channels(x);
        let (kh, kw) = kernel;
        let k = glorot_uniform(self.rng, &[c, 1, kh, kw], kh * kw * c, kh * kw);
        let kernel_id = self.weight(kernel_name, k);
        let bias = use_bias.then(|| self.weight(format!("{node_name}/bias"), ArrayD::zeros(IxDyn(&[c]))));
        self.push(
            node_name,
            Op::Conv {
                kernel: kernel_id,
                bias,
                stride,
                padding,
                depthwise: true,
            },
            vec![x],
            c,
        )
    }

    /// Depthwise then pointwise convolution, without bias.
    pub fn separable(&mut self, x: NodeId, name: &str, filters: usize, kernel: (usize, usize), padding: Padding) -> NodeId {
        let dw = self.depthwise_named(
            x,
            format!("{name}/depthwise"),
            format!("{name}/depthwise_kernel"),
            kernel,
            (1, 1),
            padding,
            false,
        );
        let cin = self.channels(dw);
        let k = glorot_uniform(self.rng, &[filters, cin, 1, 1], cin, filters);
        let pw = self.weight(format!("{name}/pointwise_kernel"), k);
        self.push(
            name.to_string(),
            Op::Conv {
                kernel: pw,
                bias: None,
                stride: (1, 1),
                padding: Padding::Valid,
                depthwise: false,
            },
            vec![dw],
            filters,
        )
    }

    pub fn batch_norm(&mut self, x: NodeId, name: Option<&str>, cfg: BnConfig) -> NodeId {
        let name = self.name_or(name, "batch_normalization");
        let c = self.channels(x);
        let gamma = cfg
            .scale
            .then(|| self.weight(format!("{name}/gamma"), ArrayD::ones(IxDyn(&[c]))));
        let beta = Some(self.weight(format!("{name}/beta"), ArrayD::zeros(IxDyn(&[c]))));
        let mean = self
            .params
            .insert(format!("{name}/moving_mean"), ArrayD::zeros(IxDyn(&[c])), ParamRole::RunningStat);
        let var = self.params.insert(
            format!("{name}/moving_variance"),
            ArrayD::ones(IxDyn(&[c])),
            ParamRole::RunningStat,
        );
        self.push(
            name,
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps: cfg.eps,
                momentum: cfg.momentum,
            },
            vec![x],
            c,
        )
    }

    pub fn act(&mut self, x: NodeId, a: Activation, name: Option<&str>) -> NodeId {
        let prefix = match a {
            Activation::Relu | Activation::Relu6 => "re_lu",
            Activation::HardSigmoid | Activation::HardSwish => "activation",
        };
        let name = self.name_or(name, prefix);
        let c = self.channels(x);
        self.push(name, Op::Act(a), vec![x], c)
    }

    pub fn max_pool(
        &mut self,
        x: NodeId,
        size: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        name: Option<&str>,
    ) -> NodeId {
        let name = self.name_or(name, "max_pooling2d");
        let c = self.channels(x);
        self.push(
            name,
            Op::MaxPool {
                size,
                stride,
                padding,
            },
            vec![x],
            c,
        )
    }

    pub fn avg_pool(
        &mut self,
        x: NodeId,
        size: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        name: Option<&str>,
    ) -> NodeId {
        let name = self.name_or(name, "average_pooling2d");
        let c = self.channels(x);
        self.push(
            name,
            Op::AvgPool {
                size,
                stride,
                padding,
            },
            vec![x],
            c,
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId, name: Option<&str>) -> NodeId {
        let name = self.name_or(name, "global_average_pooling2d");
        let c = self.channels(x);
        self.push(name, Op::GlobalAvgPool, vec![x], c)
    }

    pub fn zero_pad(&mut self, x: NodeId, spec: PadSpec, name: Option<&str>) -> NodeId {
        let name = self.name_or(name, "zero_padding2d");
        let c = self.channels(x);
        self.push(name, Op::ZeroPad(spec), vec![x], c)
    }

    pub fn add(&mut self, xs: &[NodeId], name: Option<&str>) -> NodeId {
        let name = self.name_or(name, "add");
        let c = self.channels(xs[0]);
        self.push(name, Op::Add, xs.to_vec(), c)
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId, name: Option<&str>) -> NodeId {
        let name = self.name_or(name, "multiply");
        let c = self.channels(x);
        self.push(name, Op::ChannelScale, vec![x, s], c)
    }

    pub fn concat(&mut self, xs: &[NodeId], name: Option<&str>) -> NodeId {
        let name = self.name_or(name, "concatenate");
        let c = xs.iter().map(|x| self.channels(*x)).sum();
        self.push(name, Op::Concat, xs.to_vec(), c)
    }

    pub fn scaled_add(&mut self, x: NodeId, residual: NodeId, scale: f64, name: Option<&str>) -> NodeId {
        let name = self.name_or(name, "custom_scale_layer");
        let c = self.channels(x);
        self.push(name, Op::ScaledAdd { scale }, vec![x, residual], c)
    }

    pub fn finish(self, output: NodeId) -> Graph<T> {
        let c = self.channels(output);
        Graph::from_parts(self.nodes, output, c, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::Tensor;
    use crate::nn::params::Grads;
    use rand::SeedableRng;

    fn tiny_graph(rng: &mut ChaCha8Rng) -> Graph<f64> {
        let mut b = GraphBuilder::<f64>::new(rng);
        let x = b.input(3);
        let c = b.conv(x, None, 4, (3, 3), (2, 2), Padding::Same, true);
        let n = b.batch_norm(c, None, BnConfig::default());
        let a = b.act(n, Activation::HardSwish, None);
        let s = b.global_avg_pool(a, None);
        let s = b.conv(s, None, 4, (1, 1), (1, 1), Padding::Same, true);
        let s = b.act(s, Activation::HardSigmoid, None);
        let m = b.channel_scale(a, s, None);
        let d = b.depthwise(m, None, (3, 3), (1, 1), Padding::Same, false);
        let r = b.scaled_add(m, d, 0.3, None);
        let p = b.zero_pad(r, PadSpec::Correct { kernel: 3 }, None);
        let q = b.max_pool(p, (3, 3), (2, 2), Padding::Valid, None);
        let e = b.separable(q, "sep", 5, (3, 3), Padding::Same);
        let f = b.conv(q, None, 5, (1, 1), (1, 1), Padding::Same, false);
        let cat = b.concat(&[e, f], None);
        let out = b.avg_pool(cat, (2, 2), (1, 1), Padding::Same, None);
        b.finish(out)
    }

    #[test]
    fn auto_names_follow_call_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = tiny_graph(&mut rng);
        let names: Vec<_> = g.params.iter().map(|(_, p)| p.name.clone()).collect();
        assert!(names.contains(&"conv2d/kernel".to_string()));
        assert!(names.contains(&"conv2d_1/bias".to_string()));
        assert!(names.contains(&"conv2d_2/kernel".to_string()));
        assert!(names.contains(&"sep/depthwise_kernel".to_string()));
        assert!(names.contains(&"batch_normalization/moving_variance".to_string()));
        assert_eq!(g.out_channels(), 10);
    }

    /// Whole-graph gradient check: BN in training mode, all op kinds.
    #[test]
    fn graph_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = tiny_graph(&mut rng);
        let x: Tensor<f64> = Array::from_shape_fn((2, 3, 9, 10), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d) as f64 * 0.37).sin()
        });
        let tape = g.forward_train(&x).unwrap();
        let probe = tape.output().mapv(|v| (v * 3.1).cos());
        let mut grads = Grads::for_store(&g.params);
        g.backward(&tape, probe.clone(), &mut grads).unwrap();

        let loss = |g: &mut Graph<f64>| -> f64 {
            let snapshot = g.params.clone();
            let out = g.forward_train(&x).unwrap();
            let v = (out.output() * &probe).sum();
            g.params = snapshot;
            v
        };
        let eps = 1e-6;
        let ids: Vec<_> = g
            .params
            .iter()
            .filter(|(id, _)| g.params.is_trainable(*id))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let len = g.params.value(id).len();
            for idx in [0, len / 2, len - 1] {
                let orig = g.params.value(id).as_slice().unwrap()[idx];
                g.params.value_mut(id).as_slice_mut().unwrap()[idx] = orig + eps;
                let fp = loss(&mut g);
                g.params.value_mut(id).as_slice_mut().unwrap()[idx] = orig - eps;
                let fm = loss(&mut g);
                g.params.value_mut(id).as_slice_mut().unwrap()[idx] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = grads.get(id).map_or(0.0, |d| d.as_slice().unwrap()[idx]);
                assert!(
                    (numeric - analytic).abs() < 1e-5 * (1.0 + numeric.abs()),
                    "{}[{idx}]: numeric {numeric}, analytic {analytic}",
                    g.params.get(id).name
                );
            }
        }
    }

    #[test]
    fn inference_forward_matches_training_when_stats_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = tiny_graph(&mut rng);
        let x: Tensor<f64> = Array::from_shape_fn((1, 3, 8, 8), |(_, b, c, d)| (b + c * d) as f64 * 0.01);
        let a = g.forward(&x).unwrap();
        let b = g.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim().1, 10);
    }
}
