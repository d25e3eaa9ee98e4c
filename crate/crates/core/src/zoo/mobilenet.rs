use super::Width;
use crate::nn::{Activation, BnConfig, GraphBuilder, NodeId, PadSpec, Padding};
use crate::scalar::Scalar;

const BN: BnConfig = BnConfig {
    eps: 1e-3,
    momentum: 0.999,
    scale: true,
};

/// Round to a multiple of 8, never dropping more than 10%.
pub(super) fn make_divisible(v: f64) -> usize {
    let d = 8.0f64;
    let mut new = d.max(((v + d / 2.0) / d).floor() * d);
    if new < 0.9 * v {
        new += d;
    }
    new as usize
}

#[derive(Clone, Copy)]
pub(super) enum Variant {
    Small,
    Large,
}

struct Block {
    expansion: f64,
    filters: usize,
    kernel: usize,
    stride: usize,
    se: bool,
    act: Activation,
}

const fn blk(expansion: f64, filters: usize, kernel: usize, stride: usize, se: bool, act: Activation) -> Block {
    Block {
        expansion,
        filters,
        kernel,
        stride,
        se,
        act,
    }
}

const RE: Activation = Activation::Relu;
const HS: Activation = Activation::HardSwish;

const SMALL: [Block; 11] = [
    blk(1.0, 16, 3, 2, true, RE),
    blk(72.0 / 16.0, 24, 3, 2, false, RE),
    blk(88.0 / 24.0, 24, 3, 1, false, RE),
    blk(4.0, 40, 5, 2, true, HS),
    blk(6.0, 40, 5, 1, true, HS),
    blk(6.0, 40, 5, 1, true, HS),
    blk(3.0, 48, 5, 1, true, HS),
    blk(3.0, 48, 5, 1, true, HS),
    blk(6.0, 96, 5, 2, true, HS),
    blk(6.0, 96, 5, 1, true, HS),
    blk(6.0, 96, 5, 1, true, HS),
];

const LARGE: [Block; 15] = [
    blk(1.0, 16, 3, 1, false, RE),
    blk(4.0, 24, 3, 2, false, RE),
    blk(3.0, 24, 3, 1, false, RE),
    blk(3.0, 40, 5, 2, true, RE),
    blk(3.0, 40, 5, 1, true, RE),
    blk(3.0, 40, 5, 1, true, RE),
    blk(6.0, 80, 3, 2, false, HS),
    blk(2.5, 80, 3, 1, false, HS),
    blk(2.3, 80, 3, 1, false, HS),
    blk(2.3, 80, 3, 1, false, HS),
    blk(6.0, 112, 3, 1, true, HS),
    blk(6.0, 112, 3, 1, true, HS),
    blk(6.0, 160, 5, 2, true, HS),
    blk(6.0, 160, 5, 1, true, HS),
    blk(6.0, 160, 5, 1, true, HS),
];

/// Channel count of the pointwise layer in the original classification top.
pub(super) fn last_point_channels(v: Variant) -> usize {
    match v {
        Variant::Small => 1024,
        Variant::Large => 1280,
    }
}

fn squeeze_excite<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, filters: usize, prefix: &str) -> NodeId {
    let s = b.global_avg_pool(x, Some(&format!("{prefix}squeeze_excite_avg_pool")));
    let s = b.conv(
        s,
        Some(&format!("{prefix}squeeze_excite_conv")),
        make_divisible(filters as f64 * 0.25),
        (1, 1),
        (1, 1),
        Padding::Same,
        true,
    );
    let s = b.act(s, Activation::Relu, Some(&format!("{prefix}squeeze_excite_relu")));
    let s = b.conv(s, Some(&format!("{prefix}squeeze_excite_conv_1")), filters, (1, 1), (1, 1), Padding::Same, true);
    let s = b.act(s, Activation::HardSigmoid, None);
    b.channel_scale(x, s, Some(&format!("{prefix}squeeze_excite_mul")))
}

fn inverted_residual<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, blk: &Block, id: usize, w: Width) -> NodeId {
    let infilters = b.channels(x);
    let prefix = if id == 0 {
        "expanded_conv_".to_string()
    } else {
        format!("expanded_conv_{id}_")
    };
    let n = |s: &str| format!("{prefix}{s}");
    let mut y = x;
    let expanded = make_divisible(infilters as f64 * blk.expansion);
    if id > 0 {
        y = b.conv(y, Some(&n("expand")), expanded, (1, 1), (1, 1), Padding::Same, false);
        y = b.batch_norm(y, Some(&n("expand_bn")), BN);
        y = b.act(y, blk.act, None);
    }
    let padding = if blk.stride == 2 {
        y = b.zero_pad(y, PadSpec::Correct { kernel: blk.kernel }, Some(&n("depthwise_pad")));
        Padding::Valid
    } else {
        Padding::Same
    };
    y = b.depthwise(
        y,
        Some(&n("depthwise")),
        (blk.kernel, blk.kernel),
        (blk.stride, blk.stride),
        padding,
        false,
    );
    y = b.batch_norm(y, Some(&n("depthwise_bn")), BN);
    y = b.act(y, blk.act, None);
    if blk.se {
        y = squeeze_excite(b, y, b.channels(y), &prefix);
    }
    let filters = w.divisible(blk.filters);
    y = b.conv(y, Some(&n("project")), filters, (1, 1), (1, 1), Padding::Same, false);
    y = b.batch_norm(y, Some(&n("project_bn")), BN);
    if blk.stride == 1 && infilters == filters {
        y = b.add(&[x, y], Some(&n("add")));
    }
    y
}

pub(super) fn build<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, v: Variant, w: Width) -> NodeId {
    let mut x = b.conv(x, Some("conv"), w.divisible(16), (3, 3), (2, 2), Padding::Same, false);
    x = b.batch_norm(x, Some("conv_bn"), BN);
    x = b.act(x, Activation::HardSwish, None);
    let blocks: &[Block] = match v {
        Variant::Small => &SMALL,
        Variant::Large => &LARGE,
    };
    for (id, blk) in blocks.iter().enumerate() {
        x = inverted_residual(b, x, blk, id, w);
    }
    let last = make_divisible(b.channels(x) as f64 * 6.0);
    x = b.conv(x, Some("conv_1"), last, (1, 1), (1, 1), Padding::Same, false);
    x = b.batch_norm(x, Some("conv_1_bn"), BN);
    b.act(x, Activation::HardSwish, None)
}
