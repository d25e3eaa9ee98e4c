use super::Width;
use crate::nn::{Activation, BnConfig, GraphBuilder, NodeId, PadSpec, Padding};
use crate::scalar::Scalar;

const BN: BnConfig = BnConfig {
    eps: 1.001e-5,
    momentum: 0.99,
    scale: true,
};

fn conv_block<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, growth: usize, name: &str) -> NodeId {
    let n = |s: &str| format!("{name}_{s}");
    let mut y = b.batch_norm(x, Some(&n("0_bn")), BN);
    y = b.act(y, Activation::Relu, Some(&n("0_relu")));
    y = b.conv(y, Some(&n("1_conv")), 4 * growth, (1, 1), (1, 1), Padding::Valid, false);
    y = b.batch_norm(y, Some(&n("1_bn")), BN);
    y = b.act(y, Activation::Relu, Some(&n("1_relu")));
    y = b.conv(y, Some(&n("2_conv")), growth, (3, 3), (1, 1), Padding::Same, false);
    b.concat(&[x, y], Some(&n("concat")))
}

fn transition<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str) -> NodeId {
    let n = |s: &str| format!("{name}_{s}");
    let mut y = b.batch_norm(x, Some(&n("bn")), BN);
    y = b.act(y, Activation::Relu, Some(&n("relu")));
    let half = b.channels(y) / 2;
    y = b.conv(y, Some(&n("conv")), half, (1, 1), (1, 1), Padding::Valid, false);
    b.avg_pool(y, (2, 2), (2, 2), Padding::Valid, Some(&n("pool")))
}

pub(super) fn build<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, blocks: [usize; 4], w: Width) -> NodeId {
    let growth = w.ch(32);
    let mut x = b.zero_pad(x, PadSpec::uniform(3), None);
    x = b.conv(x, Some("conv1_conv"), w.ch(64), (7, 7), (2, 2), Padding::Valid, false);
    x = b.batch_norm(x, Some("conv1_bn"), BN);
    x = b.act(x, Activation::Relu, Some("conv1_relu"));
    x = b.zero_pad(x, PadSpec::uniform(1), None);
    x = b.max_pool(x, (3, 3), (2, 2), Padding::Valid, Some("pool1"));
    for (i, &n) in blocks.iter().enumerate() {
        for j in 1..=n {
            x = conv_block(b, x, growth, &format!("conv{}_block{j}", i + 2));
        }
        if i < 3 {
            x = transition(b, x, &format!("pool{}", i + 2));
        }
    }
    x = b.batch_norm(x, Some("bn"), BN);
    b.act(x, Activation::Relu, Some("relu"))
}
