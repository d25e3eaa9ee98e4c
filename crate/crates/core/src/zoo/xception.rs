use super::Width;
use crate::nn::{Activation, BnConfig, GraphBuilder, NodeId, Padding};
use crate::scalar::Scalar;

const BN: BnConfig = BnConfig {
    eps: 1e-3,
    momentum: 0.99,
    scale: true,
};

fn sep<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str, filters: usize) -> NodeId {
    let y = b.separable(x, name, filters, (3, 3), Padding::Same);
    b.batch_norm(y, Some(&format!("{name}_bn")), BN)
}

fn relu<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, name: &str) -> NodeId {
    b.act(x, Activation::Relu, Some(name))
}

fn shortcut<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, filters: usize) -> NodeId {
    let r = b.conv(x, None, filters, (1, 1), (2, 2), Padding::Same, false);
    b.batch_norm(r, None, BN)
}

/// Entry-flow block: two separable convolutions and a strided pool, with a
/// projected shortcut.
fn entry<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, block: usize, filters: usize, pre_act: bool) -> NodeId {
    let residual = shortcut(b, x, filters);
    let mut y = x;
    if pre_act {
        y = relu(b, y, &format!("block{block}_sepconv1_act"));
    }
    y = sep(b, y, &format!("block{block}_sepconv1"), filters);
    y = relu(b, y, &format!("block{block}_sepconv2_act"));
    y = sep(b, y, &format!("block{block}_sepconv2"), filters);
    y = b.max_pool(y, (3, 3), (2, 2), Padding::Same, Some(&format!("block{block}_pool")));
    b.add(&[y, residual], None)
}

pub(super) fn build<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, w: Width) -> NodeId {
    let mut x = b.conv(x, Some("block1_conv1"), w.ch(32), (3, 3), (2, 2), Padding::Valid, false);
    x = b.batch_norm(x, Some("block1_conv1_bn"), BN);
    x = relu(b, x, "block1_conv1_act");
    x = b.conv(x, Some("block1_conv2"), w.ch(64), (3, 3), (1, 1), Padding::Valid, false);
    x = b.batch_norm(x, Some("block1_conv2_bn"), BN);
    x = relu(b, x, "block1_conv2_act");

    x = entry(b, x, 2, w.ch(128), false);
    x = entry(b, x, 3, w.ch(256), true);
    x = entry(b, x, 4, w.ch(728), true);

    for block in 5..13 {
        let residual = x;
        let mut y = x;
        for i in 1..=3 {
            y = relu(b, y, &format!("block{block}_sepconv{i}_act"));
            y = sep(b, y, &format!("block{block}_sepconv{i}"), w.ch(728));
        }
        x = b.add(&[y, residual], None);
    }

    let residual = shortcut(b, x, w.ch(1024));
    let mut y = relu(b, x, "block13_sepconv1_act");
    y = sep(b, y, "block13_sepconv1", w.ch(728));
    y = relu(b, y, "block13_sepconv2_act");
    y = sep(b, y, "block13_sepconv2", w.ch(1024));
    y = b.max_pool(y, (3, 3), (2, 2), Padding::Same, Some("block13_pool"));
    x = b.add(&[y, residual], None);

    x = sep(b, x, "block14_sepconv1", w.ch(1536));
    x = relu(b, x, "block14_sepconv1_act");
    x = sep(b, x, "block14_sepconv2", w.ch(2048));
    relu(b, x, "block14_sepconv2_act")
}
