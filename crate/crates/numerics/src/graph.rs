//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in application order. Each recorded
//! value gets a [`Var`] handle; [`Graph::backward`] walks the tape in exact
//! reverse order and accumulates adjoints. Leaves created with
//! [`Graph::param`] / [`Graph::param_ref`] receive gradients, leaves created
//! with [`Graph::constant`] / [`Graph::constant_ref`] do not (and the work to
//! differentiate into them is skipped).
//!
//! Borrowed leaves let a model bind its parameters without copying them; the
//! graph then lives no longer than the parameters it borrows.

use std::borrow::Cow;

use crate::conv::{ConvGeometry, ConvPlan};
use crate::loss::{cross_entropy_backward, cross_entropy_forward, CrossEntropyForward, LevelLayout};
use crate::{Element, NumericsError, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    NarrowChannels {
        input: Var,
        start: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        plan: Box<ConvPlan>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        layout: LevelLayout,
        targets: Vec<usize>,
        weights: Vec<T>,
        forward: CrossEntropyForward<T>,
    },
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation record: values plus the operations that produced them.
pub struct Graph<'a, T: Element = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Element> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Owned differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Borrowed differentiable leaf.
    pub fn param_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn binary(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor<T>, &Tensor<T>)> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_same_shape(op, y)?;
        Ok((x, y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.binary("add", a, b)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.binary("mul", a, b)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.derived(out, Op::Scale(a, factor), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.derived(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.derived(out, Op::Relu(a), &[a])
    }

    /// Channels `start..start + len` along axis 1.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow_channels(start, len)?;
        Ok(self.derived(out, Op::NarrowChannels { input: a, start }, &[a]))
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: &ConvGeometry) -> Result<Var> {
        let plan = ConvPlan::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            bias.map(|b| self.value(b).shape()),
            geom,
        )?;
        let out = plan.forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)));
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.derived(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                plan: Box::new(plan),
            },
            &inputs,
        ))
    }

    /// Weighted mean negative log-likelihood of `targets` under the level
    /// softmax of `logits`; see [`crate::softmax_cross_entropy`].
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        levels: usize,
        targets: Vec<usize>,
        weights: Vec<T>,
    ) -> Result<Var> {
        let layout = LevelLayout::new(self.value(logits).shape(), levels)?;
        let forward = cross_entropy_forward(self.value(logits), &layout, &targets, &weights)?;
        let out = Tensor::scalar(forward.loss);
        Ok(self.derived(
            out,
            Op::CrossEntropy {
                logits,
                layout,
                targets,
                weights,
                forward,
            },
            &[logits],
        ))
    }

    /// Adjoints of `loss` with respect to every recorded value that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(NumericsError::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts_unchecked(root.shape().to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut emit = |v: Var, delta: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += *d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves keep their adjoint"),
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    emit(*a, zip_map(&g, y, |g, y| g * y));
                    emit(*b, zip_map(&g, x, |g, x| g * x));
                }
                Op::Scale(a, factor) => emit(*a, g.map(|v| v * *factor)),
                Op::Tanh(a) => emit(*a, zip_map(&g, &node.value, |g, y| g * (T::one() - y * y))),
                Op::Sigmoid(a) => emit(*a, zip_map(&g, &node.value, |g, y| g * y * (T::one() - y))),
                Op::Relu(a) => emit(
                    *a,
                    zip_map(&g, self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() }),
                ),
                Op::NarrowChannels { input, start } => {
                    let src = self.value(*input);
                    let (outer, channels, inner) = src.channel_split()?;
                    let len = node.value.shape()[1];
                    let mut d = vec![T::zero(); src.len()];
                    for o in 0..outer {
                        let dst = (o * channels + start) * inner;
                        d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    emit(*input, Tensor::from_parts_unchecked(src.shape().to_vec(), d));
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    emit(*a, Tensor::from_parts_unchecked(src.shape().to_vec(), vec![g.data()[0]; src.len()]));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    plan,
                } => {
                    let want = (
                        self.nodes[input.0].needs_grad,
                        self.nodes[kernel.0].needs_grad,
                        bias.is_some_and(|b| self.nodes[b.0].needs_grad),
                    );
                    let (dx, dk, db) = plan.backward(self.value(*input), self.value(*kernel), &g, want);
                    if let Some(dx) = dx {
                        emit(*input, dx);
                    }
                    if let Some(dk) = dk {
                        emit(*kernel, dk);
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        emit(*b, db);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    layout,
                    targets,
                    weights,
                    forward,
                } => {
                    let d = cross_entropy_backward(forward, layout, targets, weights, g.data()[0]);
                    emit(*logits, Tensor::from_parts_unchecked(self.value(*logits).shape().to_vec(), d));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` for each of `params`, zero-filled when a parameter
    /// does not influence the loss.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let grads = self.backward(loss)?;
        Ok(params
            .iter()
            .map(|&p| grads.get(p).cloned().unwrap_or_else(|| self.value(p).zeros_like()))
            .collect())
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts_unchecked(a.shape().to_vec(), data)
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Adjoint of a leaf, or `None` when it does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}
