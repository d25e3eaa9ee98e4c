use super::Width;
use crate::nn::{Activation, GraphBuilder, NodeId, Padding};
use crate::scalar::Scalar;

pub(super) fn build<T: Scalar>(b: &mut GraphBuilder<'_, T>, mut x: NodeId, convs: [usize; 5], w: Width) -> NodeId {
    let filters = [64, 128, 256, 512, 512];
    for (block, (&n, &f)) in convs.iter().zip(&filters).enumerate() {
        for i in 1..=n {
            x = b.conv(
                x,
                Some(&format!("block{}_conv{i}", block + 1)),
                w.ch(f),
                (3, 3),
                (1, 1),
                Padding::Same,
                true,
            );
            x = b.act(x, Activation::Relu, None);
        }
        x = b.max_pool(x, (2, 2), (2, 2), Padding::Valid, Some(&format!("block{}_pool", block + 1)));
    }
    x
}
