use super::Width;
use crate::nn::{Activation, BnConfig, GraphBuilder, NodeId, PadSpec, Padding};
use crate::scalar::Scalar;

const BN: BnConfig = BnConfig {
    eps: 1.001e-5,
    momentum: 0.99,
    scale: true,
};

fn block<T: Scalar>(
    b: &mut GraphBuilder<'_, T>,
    x: NodeId,
    filters: usize,
    stride: usize,
    conv_shortcut: bool,
    name: &str,
) -> NodeId {
    let n = |s: &str| format!("{name}_{s}");
    let preact = b.batch_norm(x, Some(&n("preact_bn")), BN);
    let preact = b.act(preact, Activation::Relu, Some(&n("preact_relu")));
    let shortcut = if conv_shortcut {
        b.conv(preact, Some(&n("0_conv")), 4 * filters, (1, 1), (stride, stride), Padding::Valid, true)
    } else if stride > 1 {
        b.max_pool(x, (1, 1), (stride, stride), Padding::Valid, None)
    } else {
        x
    };
    let mut y = b.conv(preact, Some(&n("1_conv")), filters, (1, 1), (1, 1), Padding::Valid, false);
    y = b.batch_norm(y, Some(&n("1_bn")), BN);
    y = b.act(y, Activation::Relu, Some(&n("1_relu")));
    y = b.zero_pad(y, PadSpec::uniform(1), Some(&n("2_pad")));
    y = b.conv(y, Some(&n("2_conv")), filters, (3, 3), (stride, stride), Padding::Valid, false);
    y = b.batch_norm(y, Some(&n("2_bn")), BN);
    y = b.act(y, Activation::Relu, Some(&n("2_relu")));
    y = b.conv(y, Some(&n("3_conv")), 4 * filters, (1, 1), (1, 1), Padding::Valid, true);
    b.add(&[shortcut, y], Some(&n("out")))
}

fn stack<T: Scalar>(
    b: &mut GraphBuilder<'_, T>,
    mut x: NodeId,
    filters: usize,
    blocks: usize,
    stride1: usize,
    name: &str,
) -> NodeId {
    x = block(b, x, filters, 1, true, &format!("{name}_block1"));
    for i in 2..blocks {
        x = block(b, x, filters, 1, false, &format!("{name}_block{i}"));
    }
    block(b, x, filters, stride1, false, &format!("{name}_block{blocks}"))
}

pub(super) fn build<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, blocks: [usize; 4], w: Width) -> NodeId {
    let mut x = b.zero_pad(x, PadSpec::uniform(3), Some("conv1_pad"));
    x = b.conv(x, Some("conv1_conv"), w.ch(64), (7, 7), (2, 2), Padding::Valid, true);
    x = b.zero_pad(x, PadSpec::uniform(1), Some("pool1_pad"));
    x = b.max_pool(x, (3, 3), (2, 2), Padding::Valid, Some("pool1_pool"));
    x = stack(b, x, w.ch(64), blocks[0], 2, "conv2");
    x = stack(b, x, w.ch(128), blocks[1], 2, "conv3");
    x = stack(b, x, w.ch(256), blocks[2], 2, "conv4");
    x = stack(b, x, w.ch(512), blocks[3], 1, "conv5");
    x = b.batch_norm(x, Some("post_bn"), BN);
    b.act(x, Activation::Relu, Some("post_relu"))
}
