//! Reverse-mode automatic differentiation.
//!
//! Network code is written once against the [`Graph`] trait. [`Eager`]
//! evaluates it directly (inference, fusion probes); [`Tape`] evaluates it
//! eagerly as well but records every primitive so [`Tape::backward`] can
//! return gradients for all named parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvSpec, PixelNormCache, Tensor, PIXEL_NORM_EPS};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
        }
    }
}

/// The primitive operations a network is built from.
pub trait Graph<T: Scalar> {
    type Value: Clone;

    /// A constant input; never receives a gradient.
    fn input(&mut self, value: Tensor<T>) -> Self::Value;

    /// A trainable leaf, identified by the parameter's name.
    fn param(&mut self, param: &Param<T>) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        spec: &ConvSpec,
    ) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn concat(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;

    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value>;

    fn pixel_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
    ) -> Result<Self::Value>;

    fn scale(&mut self, x: &Self::Value, factor: T) -> Result<Self::Value>;

    /// Sum of all elements, as a 1×1×1×1 value.
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// Mean absolute error against a constant target.
    fn l1_loss(&mut self, pred: &Self::Value, target: &Tensor<T>) -> Result<Self::Value>;

    /// Mean squared error against a constant target.
    fn mse_loss(&mut self, pred: &Self::Value, target: &Tensor<T>) -> Result<Self::Value>;
}

fn check_target<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    let (a, b) = (pred.shape(), target.shape());
    for ((dim, x), y) in ["n", "c", "h", "w"].iter().zip(a.dims()).zip(b.dims()) {
        if x != y {
            return Err(crate::error::mismatch("loss", dim, x, y));
        }
    }
    Ok(())
}

fn l1_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_target(pred, target)?;
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum();
    Ok(Tensor::scalar(total / T::from_f64(pred.numel() as f64)))
}

fn mse_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_target(pred, target)?;
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(Tensor::scalar(total / T::from_f64(pred.numel() as f64)))
}

/// Direct evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Value = Tensor<T>;

    fn input(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn param(&mut self, param: &Param<T>) -> Tensor<T> {
        param.value.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: &ConvSpec,
    ) -> Result<Tensor<T>> {
        tensor::conv2d(x, weight, bias, spec)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::mul(a, b)
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::gelu(x))
    }

    fn concat(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        tensor::concat_channels(parts)
    }

    fn pixel_shuffle(&mut self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        tensor::pixel_shuffle(x, r)
    }

    fn pixel_norm(&mut self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::pixel_norm(x, gamma, beta, T::from_f64(PIXEL_NORM_EPS)).map(|(y, _)| y)
    }

    fn scale(&mut self, x: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
        Ok(x.map(|v| v * factor))
    }

    fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(x.sum()))
    }

    fn l1_loss(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        l1_value(pred, target)
    }

    fn mse_loss(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        mse_value(pred, target)
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(String),
    Conv2d {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        spec: ConvSpec,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Gelu(usize),
    Concat(Vec<usize>),
    PixelShuffle(usize, usize),
    PixelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: PixelNormCache<T>,
    },
    Scale(usize, T),
    Sum(usize),
    L1 {
        pred: usize,
        target: Tensor<T>,
    },
    Mse {
        pred: usize,
        target: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param(_))
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in execution order, so every node's inputs precede it and
/// a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    /// Total recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recorded primitive operations, excluding inputs and parameter leaves.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).count()
    }

    /// Name of the parameter behind a leaf node, if it is one.
    pub fn param_name(&self, id: NodeId) -> Result<Option<&str>> {
        let i = self.resolve(&id)?;
        Ok(match &self.nodes[i].op {
            Op::Param(name) => Some(name.as_str()),
            _ => None,
        })
    }

    /// Dependency list of node `index`, in argument order.
    pub fn inputs_of(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let i = self.resolve(&id)?;
        let idx = |index| NodeId { tape: self.id, index };
        Ok(match &self.nodes[i].op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, weight, bias, .. } => {
                let mut v = vec![idx(*x), idx(*weight)];
                v.extend(bias.map(idx));
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![idx(*a), idx(*b)],
            Op::Gelu(a) | Op::PixelShuffle(a, _) | Op::Scale(a, _) | Op::Sum(a) => vec![idx(*a)],
            Op::Concat(parts) => parts.iter().copied().map(idx).collect(),
            Op::PixelNorm { x, gamma, beta, .. } => vec![idx(*x), idx(*gamma), idx(*beta)],
            Op::L1 { pred, .. } | Op::Mse { pred, .. } => vec![idx(*pred)],
        })
    }

    fn resolve(&self, id: &NodeId) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::Usage(format!(
                "node from tape {} used on tape {}",
                id.tape, self.id
            )));
        }
        if id.index >= self.nodes.len() {
            return Err(Error::Usage(format!("dangling node index {}", id.index)));
        }
        Ok(id.index)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    /// Leaves that do not influence the loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<T>> {
        let root = self.resolve(&loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::scalar(T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    spec,
                } => {
                    let xs = self.val(*x).shape();
                    let gx = tensor::conv2d_grad_input(&g, self.val(*weight), spec, xs);
                    let gw = tensor::conv2d_grad_weight(&g, self.val(*x), spec);
                    if let Some(b) = bias {
                        let gb = tensor::conv2d_grad_bias(&g);
                        let gb = gb.reshape(self.val(*b).shape())?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                    accumulate(&mut grads, *weight, gw)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = tensor::mul(&g, self.val(*b))?;
                    let gb = tensor::mul(&g, self.val(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Gelu(a) => {
                    let x = self.val(*a);
                    let mut gx = g;
                    for (d, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                        *d *= tensor::gelu_derivative(v);
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).shape().c).collect();
                    let pieces = tensor::split_channels(&g, &widths)?;
                    for (&p, piece) in parts.iter().zip(pieces) {
                        accumulate(&mut grads, p, piece)?;
                    }
                }
                Op::PixelShuffle(a, r) => {
                    accumulate(&mut grads, *a, tensor::pixel_unshuffle(&g, *r)?)?;
                }
                Op::PixelNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let gm = self.val(*gamma);
                    let (gx, ggamma, gbeta) = tensor::pixel_norm_backward(&g, gm, cache);
                    accumulate(&mut grads, *beta, gbeta.reshape(self.val(*beta).shape())?)?;
                    accumulate(&mut grads, *gamma, ggamma.reshape(gm.shape())?)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *a, g.map(|v| v * f))?;
                }
                Op::Sum(a) => {
                    let s = g.item()?;
                    accumulate(&mut grads, *a, Tensor::full(self.val(*a).shape(), s))?;
                }
                Op::L1 { pred, target } => {
                    let s = g.item()? / T::from_f64(target.numel() as f64);
                    let p = self.val(*pred);
                    let mut gp = Tensor::zeros(p.shape());
                    for ((d, &a), &b) in gp.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
                        let r = a - b;
                        // Subgradient 0 at zero residual.
                        *d = if r > T::zero() {
                            s
                        } else if r < T::zero() {
                            -s
                        } else {
                            T::zero()
                        };
                    }
                    accumulate(&mut grads, *pred, gp)?;
                }
                Op::Mse { pred, target } => {
                    let s = T::from_f64(2.0) * g.item()? / T::from_f64(target.numel() as f64);
                    let p = self.val(*pred);
                    let mut gp = Tensor::zeros(p.shape());
                    for ((d, &a), &b) in gp.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
                        *d = s * (a - b);
                    }
                    accumulate(&mut grads, *pred, gp)?;
                }
            }
        }

        let mut map = BTreeMap::new();
        for (name, &i) in &self.params {
            let g = if i <= root {
                grads[i].take()
            } else {
                None
            };
            let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
            map.insert(name.clone(), g);
        }
        Ok(GradMap { grads: map })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) -> Result<()> {
    match &mut grads[i] {
        Some(acc) => acc.add_scaled_(&g, T::one()),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Value = NodeId;

    fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    fn param(&mut self, param: &Param<T>) -> NodeId {
        if let Some(&i) = self.params.get(&param.name) {
            return NodeId {
                tape: self.id,
                index: i,
            };
        }
        let id = self.push(Op::Param(param.name.clone()), param.value.clone());
        self.params.insert(param.name.clone(), id.index);
        id
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        &self.nodes[v.index].value
    }

    fn conv2d(
        &mut self,
        x: &NodeId,
        weight: &NodeId,
        bias: Option<&NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let xi = self.resolve(x)?;
        let wi = self.resolve(weight)?;
        let bi = bias.map(|b| self.resolve(b)).transpose()?;
        let value = tensor::conv2d(self.val(xi), self.val(wi), bi.map(|b| self.val(b)), spec)?;
        Ok(self.push(
            Op::Conv2d {
                x: xi,
                weight: wi,
                bias: bi,
                spec: *spec,
            },
            value,
        ))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let value = tensor::add(self.val(ai), self.val(bi))?;
        Ok(self.push(Op::Add(ai, bi), value))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let value = tensor::mul(self.val(ai), self.val(bi))?;
        Ok(self.push(Op::Mul(ai, bi), value))
    }

    fn gelu(&mut self, x: &NodeId) -> Result<NodeId> {
        let xi = self.resolve(x)?;
        let value = tensor::gelu(self.val(xi));
        Ok(self.push(Op::Gelu(xi), value))
    }

    fn concat(&mut self, parts: &[&NodeId]) -> Result<NodeId> {
        let idx = parts
            .iter()
            .map(|p| self.resolve(p))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| self.val(i)).collect();
        let value = tensor::concat_channels(&values)?;
        Ok(self.push(Op::Concat(idx), value))
    }

    fn pixel_shuffle(&mut self, x: &NodeId, r: usize) -> Result<NodeId> {
        let xi = self.resolve(x)?;
        let value = tensor::pixel_shuffle(self.val(xi), r)?;
        Ok(self.push(Op::PixelShuffle(xi, r), value))
    }

    fn pixel_norm(&mut self, x: &NodeId, gamma: &NodeId, beta: &NodeId) -> Result<NodeId> {
        let (xi, gi, bi) = (self.resolve(x)?, self.resolve(gamma)?, self.resolve(beta)?);
        let (value, cache) = tensor::pixel_norm(
            self.val(xi),
            self.val(gi),
            self.val(bi),
            T::from_f64(PIXEL_NORM_EPS),
        )?;
        Ok(self.push(
            Op::PixelNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
            },
            value,
        ))
    }

    fn scale(&mut self, x: &NodeId, factor: T) -> Result<NodeId> {
        let xi = self.resolve(x)?;
        let value = self.val(xi).map(|v| v * factor);
        Ok(self.push(Op::Scale(xi, factor), value))
    }

    fn sum(&mut self, x: &NodeId) -> Result<NodeId> {
        let xi = self.resolve(x)?;
        let value = Tensor::scalar(self.val(xi).sum());
        Ok(self.push(Op::Sum(xi), value))
    }

    fn l1_loss(&mut self, pred: &NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let pi = self.resolve(pred)?;
        let value = l1_value(self.val(pi), target)?;
        Ok(self.push(
            Op::L1 {
                pred: pi,
                target: target.clone(),
            },
            value,
        ))
    }

    fn mse_loss(&mut self, pred: &NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let pi = self.resolve(pred)?;
        let value = mse_value(self.val(pi), target)?;
        Ok(self.push(
            Op::Mse {
                pred: pi,
                target: target.clone(),
            },
            value,
        ))
    }
}

/// Parameter name → gradient of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor<T>)>) -> Self {
        GradMap {
            grads: entries.into_iter().collect(),
        }
    }
}

/// Compares taped gradients against central finite differences.
///
/// Each entry `x` is perturbed by `h = eps * max(1, |x|)`. Returns the
/// maximum over all entries of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &[Param<f64>], eps: f64, forward: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Param<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = forward(&mut tape, &ids)?;
        tape.value(&loss).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p)).collect();
    let loss = forward(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Param<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(&p.name)
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        for i in 0..p.value.numel() {
            let x = p.value.data()[i];
            let h = eps * x.abs().max(1.0);
            work[pi].value.data_mut()[i] = x + h;
            let up = eval(&work)?;
            work[pi].value.data_mut()[i] = x - h;
            let down = eval(&work)?;
            work[pi].value.data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
