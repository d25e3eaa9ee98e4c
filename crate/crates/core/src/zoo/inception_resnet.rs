use super::Width;
use crate::nn::{Activation, BnConfig, GraphBuilder, NodeId, Padding};
use crate::scalar::Scalar;

const BN: BnConfig = BnConfig {
    eps: 1e-3,
    momentum: 0.99,
    scale: false,
};

/// Convolution, batch norm without gamma, then relu.
fn cbr<T: Scalar>(
    b: &mut GraphBuilder<'_, T>,
    x: NodeId,
    filters: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
    name: Option<&str>,
) -> NodeId {
    let y = b.conv(x, name, filters, kernel, (stride, stride), padding, false);
    let bn = name.map(|n| format!("{n}_bn"));
    let y = b.batch_norm(y, bn.as_deref(), BN);
    let ac = name.map(|n| format!("{n}_ac"));
    b.act(y, Activation::Relu, ac.as_deref())
}

fn c<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, filters: usize, kernel: (usize, usize)) -> NodeId {
    cbr(b, x, filters, kernel, 1, Padding::Same, None)
}

#[derive(Clone, Copy)]
enum Kind {
    Block35,
    Block17,
    Block8,
}

fn residual_block<T: Scalar>(
    b: &mut GraphBuilder<'_, T>,
    x: NodeId,
    kind: Kind,
    idx: usize,
    scale: f64,
    activate: bool,
    w: Width,
) -> NodeId {
    let branches = match kind {
        Kind::Block35 => {
            let b0 = c(b, x, w.ch(32), (1, 1));
            let b1 = c(b, x, w.ch(32), (1, 1));
            let b1 = c(b, b1, w.ch(32), (3, 3));
            let b2 = c(b, x, w.ch(32), (1, 1));
            let b2 = c(b, b2, w.ch(48), (3, 3));
            let b2 = c(b, b2, w.ch(64), (3, 3));
            vec![b0, b1, b2]
        }
        Kind::Block17 => {
            let b0 = c(b, x, w.ch(192), (1, 1));
            let b1 = c(b, x, w.ch(128), (1, 1));
            let b1 = c(b, b1, w.ch(160), (1, 7));
            let b1 = c(b, b1, w.ch(192), (7, 1));
            vec![b0, b1]
        }
        Kind::Block8 => {
            let b0 = c(b, x, w.ch(192), (1, 1));
            let b1 = c(b, x, w.ch(192), (1, 1));
            let b1 = c(b, b1, w.ch(224), (1, 3));
            let b1 = c(b, b1, w.ch(256), (3, 1));
            vec![b0, b1]
        }
    };
    let prefix = match kind {
        Kind::Block35 => "block35",
        Kind::Block17 => "block17",
        Kind::Block8 => "block8",
    };
    let name = format!("{prefix}_{idx}");
    let mixed = b.concat(&branches, Some(&format!("{name}_mixed")));
    let out = b.channels(x);
    let up = b.conv(mixed, Some(&format!("{name}_conv")), out, (1, 1), (1, 1), Padding::Same, true);
    let y = b.scaled_add(x, up, scale, None);
    if activate {
        b.act(y, Activation::Relu, Some(&format!("{name}_ac")))
    } else {
        y
    }
}

pub(super) fn build<T: Scalar>(b: &mut GraphBuilder<'_, T>, x: NodeId, w: Width) -> NodeId {
    let v = Padding::Valid;
    let mut x = cbr(b, x, w.ch(32), (3, 3), 2, v, None);
    x = cbr(b, x, w.ch(32), (3, 3), 1, v, None);
    x = c(b, x, w.ch(64), (3, 3));
    x = b.max_pool(x, (3, 3), (2, 2), v, None);
    x = cbr(b, x, w.ch(80), (1, 1), 1, v, None);
    x = cbr(b, x, w.ch(192), (3, 3), 1, v, None);
    x = b.max_pool(x, (3, 3), (2, 2), v, None);

    let b0 = c(b, x, w.ch(96), (1, 1));
    let b1 = c(b, x, w.ch(48), (1, 1));
    let b1 = c(b, b1, w.ch(64), (5, 5));
    let b2 = c(b, x, w.ch(64), (1, 1));
    let b2 = c(b, b2, w.ch(96), (3, 3));
    let b2 = c(b, b2, w.ch(96), (3, 3));
    let bp = b.avg_pool(x, (3, 3), (1, 1), Padding::Same, None);
    let bp = c(b, bp, w.ch(64), (1, 1));
    x = b.concat(&[b0, b1, b2, bp], Some("mixed_5b"));

    for idx in 1..=10 {
        x = residual_block(b, x, Kind::Block35, idx, 0.17, true, w);
    }

    let b0 = cbr(b, x, w.ch(384), (3, 3), 2, v, None);
    let b1 = c(b, x, w.ch(256), (1, 1));
    let b1 = c(b, b1, w.ch(256), (3, 3));
    let b1 = cbr(b, b1, w.ch(384), (3, 3), 2, v, None);
    let bp = b.max_pool(x, (3, 3), (2, 2), v, None);
    x = b.concat(&[b0, b1, bp], Some("mixed_6a"));

    for idx in 1..=20 {
        x = residual_block(b, x, Kind::Block17, idx, 0.1, true, w);
    }

    let b0 = c(b, x, w.ch(256), (1, 1));
    let b0 = cbr(b, b0, w.ch(384), (3, 3), 2, v, None);
    let b1 = c(b, x, w.ch(256), (1, 1));
    let b1 = cbr(b, b1, w.ch(288), (3, 3), 2, v, None);
    let b2 = c(b, x, w.ch(256), (1, 1));
    let b2 = c(b, b2, w.ch(288), (3, 3));
    let b2 = cbr(b, b2, w.ch(320), (3, 3), 2, v, None);
    let bp = b.max_pool(x, (3, 3), (2, 2), v, None);
    x = b.concat(&[b0, b1, b2, bp], Some("mixed_7a"));

    for idx in 1..=9 {
        x = residual_block(b, x, Kind::Block8, idx, 0.2, true, w);
    }
    x = residual_block(b, x, Kind::Block8, 10, 1.0, false, w);
    cbr(b, x, w.ch(1536), (1, 1), 1, Padding::Same, Some("conv_7b"))
}
