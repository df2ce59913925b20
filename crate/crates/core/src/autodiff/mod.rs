//! Reverse-mode automatic differentiation over the layer primitives used by
//! the network.

mod graph;
pub mod gradcheck;
pub mod kernels;

pub use graph::{Gradients, Graph, NodeId, Op, ParamStore};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

// Eager single-op helpers. Each builds a throwaway graph so that the eager
// and graph paths share one implementation.

fn eager<T: Real>(
    inputs: &[&Tensor<T>],
    build: impl FnOnce(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(ParamStore::new());
    let mut ids = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let id = g.input(format!("in{i}"), t.shape())?;
        g.set_input(id, t)?;
        ids.push(id);
    }
    let out = build(&mut g, &ids)?;
    g.forward()?;
    Ok(g.value(out).clone())
}

pub fn conv2d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    eager(&[input, weights, bias], |g, x| g.conv2d(x[0], x[1], x[2], stride, pad, "conv2d"))
}

pub fn maxpool2d<T: Real>(input: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    eager(&[input], |g, x| g.maxpool2d(x[0], k, stride, "maxpool2d"))
}

pub fn fully_connected<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    eager(&[input, weights, bias], |g, x| g.linear(x[0], x[1], x[2], "fully_connected"))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    eager(&[input], |g, x| g.relu(x[0], "relu"))
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    eager(&[a, b], |g, x| g.concat_channels(x[0], x[1], "concat"))
}

pub fn sq_euclidean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    Ok(eager(&[a, b], |g, x| g.sq_euclidean(x[0], x[1], "sq_euclidean"))?.item())
}

pub fn softmax2<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    eager(&[logits], |g, x| g.softmax2(x[0], "softmax2"))
}
