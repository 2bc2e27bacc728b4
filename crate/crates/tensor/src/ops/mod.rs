pub mod conv;
pub mod elementwise;
pub mod fft;
pub mod layout;
pub mod norm;
pub mod pool;
pub mod reduce;

use crate::error::Result;
use crate::graph::{Graph, Op, Value, Var};
use crate::Scalar;

/// Gradient contributions of node `v` to its inputs, given the gradient
/// flowing into `v`.
pub(crate) fn backward_node<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    grad: &Value<T>,
) -> Result<Vec<(Var, Value<T>)>> {
    if let Op::Fft2 { x, inverse } = g.node(v).op {
        return fft::backward_fft2(g, x, inverse, grad);
    }
    let g: &Graph<T> = g;
    let node = g.node(v);
    match &node.op {
        Op::Leaf | Op::Fft2 { .. } => Ok(vec![]),
        Op::Binary(kind, a, b) => elementwise::backward_binary(g, *kind, *a, *b, &node.shape, grad),
        Op::Unary(kind, a) => elementwise::backward_unary(g, *kind, *a, &node.value, grad),
        Op::Sum(a) => Ok(reduce::backward_sum(g, *a, grad)),
        Op::SumLast2(a) => reduce::backward_sum_last2(g, *a, grad),
        Op::Softmax2(a) => reduce::backward_softmax2(g, *a, &node.value, grad),
        Op::Reshape(a) => Ok(vec![(*a, grad.clone())]),
        Op::Conv2d {
            x,
            k,
            bias,
            stride,
            pad,
        } => conv::backward_conv2d(g, *x, *k, *bias, *stride, *pad, &node.shape, grad),
        Op::ConvTranspose2d { x, k, stride, pad } => {
            conv::backward_conv_transpose2d(g, *x, *k, *stride, *pad, &node.shape, grad)
        }
        Op::MaxPool2 { x, argmax } => pool::backward_maxpool2(g, *x, argmax, grad),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => norm::backward_batch_norm(g, *x, *gamma, *beta, xhat, inv_std, *train, grad),
        Op::Concat { inputs, axis } => Ok(layout::backward_concat(g, inputs, *axis, grad)),
        Op::Pad2d { x, pads, mode } => Ok(layout::backward_pad2d(g, *x, *pads, *mode, grad)),
        Op::Crop2d { x, top, left } => Ok(layout::backward_crop2d(g, *x, *top, *left, &node.shape, grad)),
        Op::Resample2d { x, weights } => layout::backward_resample2d(*x, weights, grad),
    }
}
