//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order: every node's inputs are earlier
//! nodes. Parameters live in a [`ParamStore`] owned by the graph and are
//! referenced by exactly one leaf node each, so a parameter used by several
//! consumers accumulates their gradients additively.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

pub type NodeId = usize;

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Graph(format!("duplicate parameter name '{name}'")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    fn by_index(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies values from `other` for every shared name with equal shape.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Graph(format!("parameter '{name}' missing from source")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape(
                    "copy_from",
                    format!("parameter '{name}': {:?} vs {:?}", t.shape(), src.shape()),
                ));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Per-parameter gradients, in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Gradients {
            map: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `self += scale * other`, matching by name.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) -> Result<()> {
        for (name, g) in other.iter() {
            let dst = self
                .map
                .get_mut(name)
                .ok_or_else(|| Error::Graph(format!("gradient '{name}' not present")))?;
            if dst.shape() != g.shape() {
                return Err(Error::shape("add_scaled", format!("gradient '{name}' shape differs")));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * *s;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.map.values().all(|t| t.data().iter().all(|v| *v == T::zero()))
    }

    pub fn max_abs(&self) -> T {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param(usize),
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { k: usize, stride: usize },
    Linear,
    Relu,
    Concat,
    SqEuclidean,
    Euclidean,
    Softmax2,
    L2Normalize,
    Add,
    Sub,
    Scale(f64),
    AddScalar(f64),
    Square,
    NegLogAt { index: usize, eps: f64 },
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Col(Vec<T>),
    Argmax(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    label: String,
    value: Tensor<T>,
    cache: Cache<T>,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: ParamStore<T>,
    param_nodes: HashMap<usize, NodeId>,
}

fn value_of<'a, T: Real>(before: &'a [Node<T>], params: &'a ParamStore<T>, id: NodeId) -> &'a Tensor<T> {
    match before[id].op {
        Op::Param(idx) => params.by_index(idx),
        _ => &before[id].value,
    }
}

fn f<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Real> Graph<T> {
    pub fn new(params: ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            params,
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id].label
    }

    pub fn node_inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].inputs
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        value_of(&self.nodes, &self.params, id)
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).item()
    }

    /// Node ids whose op matches `pred`.
    pub fn find_ops(&self, pred: impl Fn(&Op) -> bool) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| pred(&self.nodes[i].op)).collect()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: &[usize], label: impl Into<String>) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs,
            label: label.into(),
            value: Tensor::zeros(shape),
            cache: Cache::None,
        });
        self.nodes.len() - 1
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node id {id}")));
        }
        Ok(())
    }

    pub fn input(&mut self, label: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("input", format!("invalid input shape {shape:?}")));
        }
        Ok(self.push(Op::Input, vec![], shape, label))
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Graph(format!("no parameter named '{name}'")))?;
        if let Some(&id) = self.param_nodes.get(&idx) {
            return Ok(id);
        }
        self.nodes.push(Node {
            op: Op::Param(idx),
            inputs: vec![],
            label: name.to_string(),
            value: Tensor::zeros(&[1]),
            cache: Cache::None,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    pub fn set_input(&mut self, id: NodeId, t: &Tensor<T>) -> Result<()> {
        self.check_id(id)?;
        let node = &mut self.nodes[id];
        if node.op != Op::Input {
            return Err(Error::Graph(format!("node {id} ({}) is not an input", node.label)));
        }
        if node.value.shape() != t.shape() {
            return Err(Error::shape(
                "set_input",
                format!("input '{}' expects {:?}, got {:?}", node.label, node.value.shape(), t.shape()),
            ));
        }
        node.value.data_mut().copy_from_slice(t.data());
        Ok(())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize, label: &str) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check_id(id)?;
        }
        let geom = self.conv_geom(x, w, stride, pad)?;
        let bs = self.shape(b);
        if bs != [geom.out_c] {
            return Err(Error::shape("conv2d", format!("bias shape {bs:?} for {} output channels", geom.out_c)));
        }
        let shape = [geom.out_c, geom.out_h(), geom.out_w()];
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w, b], &shape, label))
    }

    fn conv_geom(&self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?} / weights {ws:?} must be [C,H,W] / [Co,Ci,kH,kW]")));
        }
        if ws[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("weights expect {} input channels, input has {}", ws[1], xs[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if ws[2] > xs[1] + 2 * pad || ws[3] > xs[2] + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {:?} (pad {pad})", ws[2], ws[3], xs),
            ));
        }
        Ok(ConvGeom {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_c: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        })
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize, label: &str) -> Result<NodeId> {
        self.check_id(x)?;
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!("maxpool2d: k={k}, stride={stride} must be >= 1")));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || k > xs[1] || k > xs[2] {
            return Err(Error::shape("maxpool2d", format!("window {k} does not fit input {xs:?}")));
        }
        let shape = [xs[0], (xs[1] - k) / stride + 1, (xs[2] - k) / stride + 1];
        Ok(self.push(Op::MaxPool2d { k, stride }, vec![x], &shape, label))
    }

    /// `W·flatten(x) + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check_id(id)?;
        }
        let d_in = numel(self.shape(x));
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != d_in || self.shape(b) != [ws[0]] {
            return Err(Error::shape(
                "fully_connected",
                format!("input of {d_in} values, weights {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        Ok(self.push(Op::Linear, vec![x, w, b], &[ws[0]], label))
    }

    pub fn relu(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Relu, vec![x], &shape, label))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_channels", format!("spatial mismatch {sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Concat, vec![a, b], &[sa[0] + sb[0], sa[1], sa[2]], label))
    }

    fn same_len(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::shape(op, format!("dimension mismatch {la} vs {lb}")));
        }
        Ok(())
    }

    pub fn sq_euclidean(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        self.same_len("sq_euclidean", a, b)?;
        Ok(self.push(Op::SqEuclidean, vec![a, b], &[1], label))
    }

    pub fn euclidean(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        self.same_len("euclidean", a, b)?;
        Ok(self.push(Op::Euclidean, vec![a, b], &[1], label))
    }

    pub fn softmax2(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        self.check_id(x)?;
        if self.value(x).len() != 2 {
            return Err(Error::shape("softmax2", format!("expects 2 logits, got {:?}", self.shape(x))));
        }
        Ok(self.push(Op::Softmax2, vec![x], &[2], label))
    }

    pub fn l2_normalize(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::L2Normalize, vec![x], &shape, label))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        self.same_len("add", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add, vec![a, b], &shape, label))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<NodeId> {
        self.same_len("sub", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub, vec![a, b], &shape, label))
    }

    pub fn scale(&mut self, x: NodeId, c: f64, label: &str) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Scale(c), vec![x], &shape, label))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64, label: &str) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddScalar(c), vec![x], &shape, label))
    }

    pub fn square(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        self.check_id(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Square, vec![x], &shape, label))
    }

    /// `-ln(clamp(p[index], eps, 1-eps))`.
    pub fn neg_log_at(&mut self, p: NodeId, index: usize, eps: f64, label: &str) -> Result<NodeId> {
        self.check_id(p)?;
        if index >= self.value(p).len() {
            return Err(Error::shape("neg_log_at", format!("index {index} out of range")));
        }
        Ok(self.push(Op::NegLogAt { index, eps }, vec![p], &[1], label))
    }

    /// Sum of scalar nodes, each scaled by its weight.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)], label: &str) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for (i, &(id, w)) in terms.iter().enumerate() {
            let scaled = if w == 1.0 { id } else { self.scale(id, w, &format!("{label}.w{i}"))? };
            acc = Some(match acc {
                None => scaled,
                Some(prev) => self.add(prev, scaled, &format!("{label}.sum{i}"))?,
            });
        }
        acc.ok_or_else(|| Error::Graph("weighted_sum of no terms".into()))
    }

    /// Evaluates every node in order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let params = &self.params;
            let inp = |k: usize| value_of(before, params, node.inputs[k]);
            match node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d { stride, pad } => {
                    let (x, w, b) = (inp(0), inp(1), inp(2));
                    let geom = conv_geom_of(x.shape(), w.shape(), stride, pad);
                    let mut col = match std::mem::replace(&mut node.cache, Cache::None) {
                        Cache::Col(c) => c,
                        _ => Vec::new(),
                    };
                    kernels::conv2d_forward(x.data(), w.data(), b.data(), &geom, &mut col, node.value.data_mut());
                    node.cache = Cache::Col(col);
                }
                Op::MaxPool2d { k, stride } => {
                    let x = inp(0);
                    let s = x.shape();
                    let mut am = match std::mem::replace(&mut node.cache, Cache::None) {
                        Cache::Argmax(a) => a,
                        _ => Vec::new(),
                    };
                    kernels::maxpool_forward(x.data(), (s[0], s[1], s[2]), k, stride, node.value.data_mut(), &mut am);
                    node.cache = Cache::Argmax(am);
                }
                Op::Linear => {
                    let (x, w, b) = (inp(0), inp(1), inp(2));
                    kernels::linear_forward(x.data(), w.data(), b.data(), node.value.data_mut());
                }
                Op::Relu => {
                    let x = inp(0);
                    for (o, &v) in node.value.data_mut().iter_mut().zip(x.data()) {
                        *o = if v < T::zero() { T::zero() } else { v };
                    }
                }
                Op::Concat => {
                    let (a, b) = (inp(0), inp(1));
                    let out = node.value.data_mut();
                    out[..a.len()].copy_from_slice(a.data());
                    out[a.len()..].copy_from_slice(b.data());
                }
                Op::SqEuclidean => {
                    let (a, b) = (inp(0), inp(1));
                    let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
                    node.value.data_mut()[0] = s;
                }
                Op::Euclidean => {
                    let (a, b) = (inp(0), inp(1));
                    let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
                    node.value.data_mut()[0] = s.sqrt();
                }
                Op::Softmax2 => {
                    let p = kernels::softmax2(inp(0).data());
                    node.value.data_mut().copy_from_slice(&p);
                }
                Op::L2Normalize => {
                    let x = inp(0);
                    let n = x.l2_norm();
                    for (o, &v) in node.value.data_mut().iter_mut().zip(x.data()) {
                        *o = if n > T::zero() { v / n } else { T::zero() };
                    }
                }
                Op::Add | Op::Sub => {
                    let (a, b) = (inp(0), inp(1));
                    let sub = node.op == Op::Sub;
                    for ((o, &x), &y) in node.value.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *o = if sub { x - y } else { x + y };
                    }
                }
                Op::Scale(c) => {
                    let c: T = f(c);
                    for (o, &v) in node.value.data_mut().iter_mut().zip(inp(0).data()) {
                        *o = v * c;
                    }
                }
                Op::AddScalar(c) => {
                    let c: T = f(c);
                    for (o, &v) in node.value.data_mut().iter_mut().zip(inp(0).data()) {
                        *o = v + c;
                    }
                }
                Op::Square => {
                    for (o, &v) in node.value.data_mut().iter_mut().zip(inp(0).data()) {
                        *o = v * v;
                    }
                }
                Op::NegLogAt { index, eps } => {
                    let p = inp(0).data()[index];
                    let e: T = f(eps);
                    let clamped = p.max(e).min(T::one() - e);
                    node.value.data_mut()[0] = -clamped.ln();
                }
            }
        }
        Ok(())
    }

    /// First node (in evaluation order) holding a NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<(NodeId, &str)> {
        (0..self.nodes.len())
            .find(|&i| !self.value(i).is_finite())
            .map(|i| (i, self.nodes[i].label.as_str()))
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.check_id(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss node, '{}' has shape {:?}",
                self.nodes[loss].label,
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Reverse pass starting from arbitrary upstream gradients on any nodes.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Vec<T>)]) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut top = 0;
        for (id, g) in seeds {
            self.check_id(*id)?;
            if g.len() != self.value(*id).len() {
                return Err(Error::shape("backward", format!("seed for node {id} has wrong length")));
            }
            let slot = grads[*id].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += *v;
            }
            top = top.max(*id + 1);
        }
        let mut out = Gradients::zeros_like(&self.params);
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(idx) = node.op {
                let dst = out.map.get_index_mut(idx).expect("param index").1;
                for (d, v) in dst.data_mut().iter_mut().zip(&g) {
                    *d += *v;
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn backward_node(&self, i: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let inp = |k: usize| self.value(node.inputs[k]);
        // Returns a zero-initialised (or existing) gradient buffer for input k.
        fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], id: NodeId, len: usize) -> &'a mut [T] {
            grads[id].get_or_insert_with(|| vec![T::zero(); len])
        }
        let ids = &node.inputs;
        match node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { stride, pad } => {
                let (x, w) = (inp(0), inp(1));
                let geom = conv_geom_of(x.shape(), w.shape(), stride, pad);
                let Cache::Col(col) = &node.cache else {
                    panic!("conv2d backward before forward")
                };
                let mut dx = grads[ids[0]].take().unwrap_or_else(|| vec![T::zero(); x.len()]);
                let mut dw = grads[ids[1]].take().unwrap_or_else(|| vec![T::zero(); w.len()]);
                let mut db = grads[ids[2]].take().unwrap_or_else(|| vec![T::zero(); geom.out_c]);
                let need_dx = !matches!(self.nodes[ids[0]].op, Op::Input);
                kernels::conv2d_backward(
                    g,
                    w.data(),
                    col,
                    &geom,
                    need_dx.then_some(dx.as_mut_slice()),
                    Some(&mut dw),
                    Some(&mut db),
                );
                grads[ids[0]] = Some(dx);
                grads[ids[1]] = Some(dw);
                grads[ids[2]] = Some(db);
            }
            Op::MaxPool2d { .. } => {
                let Cache::Argmax(am) = &node.cache else {
                    panic!("maxpool backward before forward")
                };
                let dx = slot(grads, ids[0], inp(0).len());
                kernels::maxpool_backward(g, am, dx);
            }
            Op::Linear => {
                let (x, w) = (inp(0), inp(1));
                let mut dx = grads[ids[0]].take().unwrap_or_else(|| vec![T::zero(); x.len()]);
                let mut dw = grads[ids[1]].take().unwrap_or_else(|| vec![T::zero(); w.len()]);
                let mut db = grads[ids[2]].take().unwrap_or_else(|| vec![T::zero(); g.len()]);
                let need_dx = !matches!(self.nodes[ids[0]].op, Op::Input);
                kernels::linear_backward(g, x.data(), w.data(), need_dx.then_some(dx.as_mut_slice()), Some(&mut dw), Some(&mut db));
                grads[ids[0]] = Some(dx);
                grads[ids[1]] = Some(dw);
                grads[ids[2]] = Some(db);
            }
            Op::Relu => {
                let x = inp(0);
                let dx = slot(grads, ids[0], x.len());
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x.data()) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Concat => {
                let (la, lb) = (inp(0).len(), inp(1).len());
                for (d, gv) in slot(grads, ids[0], la).iter_mut().zip(&g[..la]) {
                    *d += *gv;
                }
                for (d, gv) in slot(grads, ids[1], lb).iter_mut().zip(&g[la..]) {
                    *d += *gv;
                }
            }
            Op::SqEuclidean | Op::Euclidean => {
                let (a, b) = (inp(0), inp(1));
                let coef = if node.op == Op::SqEuclidean {
                    g[0] + g[0]
                } else {
                    let d = node.value.item();
                    if d > T::zero() {
                        g[0] / d
                    } else {
                        T::zero()
                    }
                };
                let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| coef * (x - y)).collect();
                for (d, v) in slot(grads, ids[0], a.len()).iter_mut().zip(&diff) {
                    *d += *v;
                }
                for (d, v) in slot(grads, ids[1], b.len()).iter_mut().zip(&diff) {
                    *d -= *v;
                }
            }
            Op::Softmax2 => {
                let y = node.value.data();
                let dot = g[0] * y[0] + g[1] * y[1];
                let dx = slot(grads, ids[0], 2);
                dx[0] += y[0] * (g[0] - dot);
                dx[1] += y[1] * (g[1] - dot);
            }
            Op::L2Normalize => {
                let x = inp(0);
                let n = x.l2_norm();
                if n > T::zero() {
                    let y = node.value.data();
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    let dx = slot(grads, ids[0], x.len());
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                        *d += (gv - yv * dot) / n;
                    }
                }
            }
            Op::Add | Op::Sub => {
                let sub = node.op == Op::Sub;
                for (d, gv) in slot(grads, ids[0], g.len()).iter_mut().zip(g) {
                    *d += *gv;
                }
                for (d, gv) in slot(grads, ids[1], g.len()).iter_mut().zip(g) {
                    if sub {
                        *d -= *gv;
                    } else {
                        *d += *gv;
                    }
                }
            }
            Op::Scale(c) => {
                let c: T = f(c);
                for (d, gv) in slot(grads, ids[0], g.len()).iter_mut().zip(g) {
                    *d += *gv * c;
                }
            }
            Op::AddScalar(_) => {
                for (d, gv) in slot(grads, ids[0], g.len()).iter_mut().zip(g) {
                    *d += *gv;
                }
            }
            Op::Square => {
                let x = inp(0);
                let two: T = f(2.0);
                for ((d, gv), &xv) in slot(grads, ids[0], g.len()).iter_mut().zip(g).zip(x.data()) {
                    *d += *gv * two * xv;
                }
            }
            Op::NegLogAt { index, eps } => {
                let p = inp(0);
                let pv = p.data()[index];
                let e: T = f(eps);
                let dx = slot(grads, ids[0], p.len());
                if pv > e && pv < T::one() - e {
                    dx[index] -= g[0] / pv;
                }
            }
        }
    }

    /// Hash of every piecewise branch taken in the last forward pass (ReLU
    /// signs, pooling argmaxes, distance-at-zero, log clamping). Two
    /// parameter settings with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu => {
                    i.hash(&mut h);
                    for v in self.value(node.inputs[0]).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { .. } => {
                    if let Cache::Argmax(am) = &node.cache {
                        am.hash(&mut h);
                    }
                }
                Op::Euclidean | Op::L2Normalize => {
                    (node.value.data().iter().all(|v| *v == T::zero())).hash(&mut h);
                }
                Op::NegLogAt { index, eps } => {
                    let p = self.value(node.inputs[0]).data()[*index];
                    let e: T = f(*eps);
                    (p > e && p < T::one() - e).hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }
}

fn conv_geom_of(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        in_c: xs[0],
        in_h: xs[1],
        in_w: xs[2],
        out_c: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride,
        pad,
    }
}
