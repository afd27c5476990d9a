//! Plain-tensor entry points for the primitive operations.
//!
//! Each function evaluates the same differentiable op the models use, on a
//! non-recording graph.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::layers::attend;
use crate::tensor::{Scalar, Tensor};

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let g = Graph::inference();
    g.constant(x.clone()).silu().value().as_ref().clone()
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let g = Graph::inference();
    Ok(g.constant(x.clone()).softmax(axis)?.value().as_ref().clone())
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let y = g
        .constant(x.clone())
        .layer_norm(g.constant(gamma.clone()), g.constant(beta.clone()), eps)?;
    Ok(y.value().as_ref().clone())
}

pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let b = b.map(|b| g.constant(b.clone()));
    Ok(g.constant(x.clone()).linear(g.constant(w.clone()), b)?.value().as_ref().clone())
}

pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::inference();
    Ok(g.constant(x.clone())
        .depthwise_conv2d(g.constant(kernel.clone()))?
        .value()
        .as_ref()
        .clone())
}

/// Projection weights of a cross-attention layer, each `[C,C]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

/// Queries from `query_feats`, keys and values from `key_value_feats`,
/// both `[L,C]`; logits scaled by `1/sqrt(C/heads)`.
pub fn cross_attention<T: Scalar>(
    query_feats: &Tensor<T>,
    key_value_feats: &Tensor<T>,
    weights: &AttentionWeights<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let q = g.constant(query_feats.clone()).linear(g.constant(weights.wq.clone()), None)?;
    let kv = g.constant(key_value_feats.clone());
    let k = kv.linear(g.constant(weights.wk.clone()), None)?;
    let v = kv.linear(g.constant(weights.wv.clone()), None)?;
    Ok(attend(q, k, v, heads)?.value().as_ref().clone())
}
